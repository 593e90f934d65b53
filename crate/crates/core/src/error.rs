use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    InvalidRotation(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid robot model: {0}")]
    InvalidModel(String),

    #[error("zero-norm embedding")]
    ZeroEmbedding,

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("trajectory {traj}: {reason}")]
    InvalidTrajectory { traj: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Dataset {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
