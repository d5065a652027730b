pub mod closed;
pub mod gamma;
pub mod qspecial;
pub mod system;

pub use closed::{solve_linear, y_closed_formula, ClosedForm, LinearOptions, LinearSolution};
pub use gamma::{mean_gamma, simulate_gamma, GammaEnsemble, MeanGamma};
pub use qspecial::{q_special_solve, Estimate, QSpecialReport};
pub use system::{
    assemble_system, direct_solve, neumann_solve, operator_norm_estimate, spectral_norm, Component, MeanVector, NeumannOptions,
    NeumannSolution, SystemForm, VolterraSystem, Window,
};
