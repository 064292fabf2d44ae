//! Command-line experiment harness for operator-network survival estimation.

pub mod config;
pub mod error;
pub mod experiments;
pub mod ingest;
pub mod output;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
