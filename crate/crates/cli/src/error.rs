use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] regmz::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {key} is {found}, expected {expected} (pass --force to override)")]
    HashMismatch {
        path: PathBuf,
        key: String,
        expected: String,
        found: String,
    },

    #[error("output directory {0} is not empty (pass --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("{0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 2 for configuration and provenance problems, 1
    /// otherwise. Divergence (exit code 3) is reported through outcomes, not
    /// errors, since partial results are still written.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::HashMismatch { .. } | CliError::OutputExists(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}
