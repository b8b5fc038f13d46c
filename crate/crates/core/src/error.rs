use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point behind camera (depth {0})")]
    BehindCamera(f64),

    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("too few exemplars: need at least {needed}, got {got}")]
    TooFewExemplars { needed: usize, got: usize },

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty point cloud: {0}")]
    EmptyCloud(&'static str),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
