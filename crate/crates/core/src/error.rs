use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layer dims {0:?}: need at least two entries, all >= 1")]
    InvalidDims(Vec<usize>),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: record {record}: {message}")]
    Validation {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("ensemble member {member} diverged at epoch {epoch} (loss {loss})")]
    Diverged { member: usize, epoch: usize, loss: f64 },

    #[error("policy loss became NaN at epoch {epoch}, minibatch {minibatch}, rollout step {step}")]
    NanLoss {
        epoch: usize,
        minibatch: usize,
        step: usize,
    },

    #[error("non-finite rollout state at step {step}")]
    RolloutDiverged { step: usize },

    #[error("model is frozen")]
    Frozen,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
