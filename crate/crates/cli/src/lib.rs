//! Experiment runner and reporting for the clinical extraction benchmark.
//!
//! The binary front end lives in [`cli`]; everything it does is also
//! available as library calls so tests can drive whole pipelines in-process.

use std::path::Path;

use thiserror::Error;

pub mod cli;
pub mod corpus;
pub mod records;
pub mod report;
pub mod run;
pub mod score;

pub use corpus::Corpus;
pub use records::{ResultRow, RunManifest, TraceRow};
pub use run::{run, RunOptions, RunSummary};
pub use score::{score, ScoreOptions, ScoreRow, ScoreTable};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("report `{0}` has no consensus annotation")]
    MissingAnnotation(String),
    #[error("{0}")]
    Analysis(String),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code for a fatal error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingAnnotation(_) => 1,
            CliError::Io { .. } | CliError::Analysis(_) => 1,
        }
    }
}

impl From<clinex_core::config::ConfigError> for CliError {
    fn from(e: clinex_core::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}
