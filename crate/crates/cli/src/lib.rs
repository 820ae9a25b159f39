//! Experiment orchestration for `delaylab`: dataset generation, training
//! runs, sweeps and report emission.

pub mod config;
pub mod error;
pub mod plot;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use run::{RunRecord, RunRequest};
