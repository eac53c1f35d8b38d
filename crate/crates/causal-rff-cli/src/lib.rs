//! Experiment pipeline around the federated causal effect engine.
//!
//! Four commands cover the full loop: `generate` writes a synthetic
//! multi-source benchmark to disk, `train` runs federated training over
//! it, `evaluate` scores a checkpoint against held-out ground truth, and
//! `bounds` tabulates the minimax error bounds. Every command writes the
//! effective config next to its outputs, so any run can be reproduced
//! from its directory alone.

pub mod bounds;
pub mod config;
pub mod evaluate;
pub mod generate;
pub mod train;

use std::fmt;

/// Failures grouped by exit code: validation errors (exit 1) mean the
/// config, flags, or input data must change; runtime errors (exit 2)
/// mean the run itself failed.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}

impl From<causal_rff::Error> for CliError {
    fn from(err: causal_rff::Error) -> Self {
        match err {
            causal_rff::Error::Parameter { .. }
            | causal_rff::Error::Shape { .. }
            | causal_rff::Error::Ingestion { .. } => CliError::Validation(err.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Runtime(err.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError::Runtime(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
