use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LgdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LgdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(PathBuf),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LgdError {
    /// Stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            LgdError::InvalidArgument(_) => "invalid-argument",
            LgdError::Parse { .. } => "parse-error",
            LgdError::Config(_) => "configuration-error",
            LgdError::CheckpointNotFound(_) => "checkpoint-not-found",
            LgdError::Checkpoint(_) => "checkpoint-invalid",
            LgdError::Divergence(_) => "divergence",
            LgdError::Io(_) => "io-error",
            LgdError::Json(_) => "json-error",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> LgdError {
    LgdError::InvalidArgument(msg.into())
}
