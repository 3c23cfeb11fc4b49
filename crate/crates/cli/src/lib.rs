//! Config-driven experiment runner: one JSON file per run, CSV tables and a
//! `report.json` in the configured output directory.

pub mod commands;
pub mod config;
mod output;

pub use commands::{run, Command};
pub use config::ExperimentConfig;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("validation failure: {0}")]
    Validation(String),
    #[error("acceptance failure: {0}")]
    Acceptance(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulation error: {0}")]
    Simulation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Acceptance(_) => 4,
            CliError::Io(_) | CliError::Simulation(_) => 1,
        }
    }
}

macro_rules! simulation_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Simulation(e.to_string())
            }
        }
    )*};
}

simulation_error!(
    knudsen::geometry::GeometryError,
    knudsen::billiard::BilliardError,
    knudsen::gas::GasError,
    serde_json::Error
);

impl From<knudsen::estimators::EstimatorError> for CliError {
    fn from(e: knudsen::estimators::EstimatorError) -> Self {
        match e {
            knudsen::estimators::EstimatorError::InsufficientCrossings => {
                CliError::Acceptance("insufficient crossings: no particle reached the far gate".into())
            }
            e => CliError::Simulation(e.to_string()),
        }
    }
}
