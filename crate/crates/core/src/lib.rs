pub mod comparison;
pub mod error;
pub mod linear;
pub mod model;
pub mod paths;
pub mod picard;
pub mod profile;
pub mod scenario;
pub mod stats;
pub mod utility;

pub use error::{Error, Result};
