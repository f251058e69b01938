//! Scenario configuration, command pipelines and report bundles for the
//! `rhsim` binary.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{run, Command, Outcome, Status};
pub use config::ScenarioConfig;
pub use report::ReportBundle;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Simulation(#[from] rhsim_core::orchestrator::OrchestratorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Calibration(_) => 3,
            _ => 1,
        }
    }
}
