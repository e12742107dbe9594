//! End-to-end wearable hypoglycemia detection pipeline driven by a single
//! TOML configuration: simulate or ingest, preprocess, window, split by
//! subject, train classical and temporal models per modality, fuse, and
//! report.

use thiserror::Error;

use hypowatch_core::ingest::LeakageViolation;

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{cmd_report, cmd_run, cmd_simulate, dry_run, Report};
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("leakage guard rejected the split: {0:?}")]
    Leakage(Vec<LeakageViolation>),
    #[error("{model} on {modality} diverged in epoch {epoch}")]
    Diverged { model: String, modality: String, epoch: usize },
    #[error("{0}")]
    Pipeline(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 2 config, 3 leakage, 4 divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Leakage(_) => 3,
            CliError::Diverged { .. } => 4,
            CliError::Pipeline(_) | CliError::Io(_) => 1,
        }
    }
}
