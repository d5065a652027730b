//! Picard iteration with least-squares Monte Carlo conditional expectations.

pub mod contraction;
pub mod regression;
pub mod solver;

pub use contraction::{apply_map, contraction_check, default_beta, envelope_fit, pair_ratio, ContractionReport, EnvelopeFit};
pub use regression::{condexp, regress, ConditionalExpectation, RegressionBasis, RegressionFit};
pub use solver::{
    picard_full_freeze, picard_mean_freeze, solve_inner, MeanFreeze, PicardReport, PicardSettings, Scheme,
};
