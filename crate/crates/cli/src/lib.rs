//! Configuration-driven experiment runner with CSV and JSON reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod report;

pub use config::{Experiment, ExperimentConfig};
pub use error::CliError;
pub use experiments::{run_experiment, run_experiment_with};
pub use report::{ExperimentReport, RowStats, Summary, TrialRow};
