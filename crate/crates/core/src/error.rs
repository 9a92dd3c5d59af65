use std::path::PathBuf;

use crate::autograd::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Input data or arguments violate a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// A read crossed the spatio-temporal protocol boundary.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite loss in {stage} at epoch {epoch}, step {step}")]
    NonFiniteLoss { stage: &'static str, epoch: usize, step: usize },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Whether the failure stems from bad input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Json(_) | Error::Invalid(_) | Error::Config(_))
    }
}
