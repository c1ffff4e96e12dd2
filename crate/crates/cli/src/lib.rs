//! Experiment runner behind the `barywin` binary.

pub mod checks;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod run;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
