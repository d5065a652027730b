//! Problem definition: terminal conditions with closed-form Malliavin
//! derivatives, drivers, mean functionals, solution grids and norms.

pub mod coefficients;
pub mod driver;
pub mod mean;
pub mod solution;
pub mod terminal;

pub use coefficients::{LinearCoefficients, PathwiseGamma};
pub use driver::{
    check_driver, AffineDriver, Driver, DriverArgs, DriverCheck, LinearDriver, MixedDriver, TimeDriver, YDependence, ZeroDriver,
};
pub use mean::{check_mean_functional, mean_functional_eval, MeanFunctional};
pub use solution::{beta_norm, SolutionGrid};
pub use terminal::{
    malliavin_b, malliavin_n, terminal_value, terminal_values, PreparedTerminal, TerminalCondition, WealthModel,
};
