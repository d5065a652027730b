//! Scenario files, mode dispatch and reproducible output.

pub mod config;
pub mod run;

pub use config::{parse_config, CompareSpec, ConfigErrors, ConfigIssue, DriverSpec, Mode, ScenarioConfig, UtilitySpec};
pub use run::{build_driver, error_exit_code, run, run_id, RunOutcome, RunStatus, MANIFEST_NAME};
