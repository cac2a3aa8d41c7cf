use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("unknown bus {bus} referenced by branch {branch}")]
    UnknownBus { bus: u32, branch: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error("singular power-flow system: {0}")]
    Singular(String),

    #[error("island injections do not balance (net {net:.3e})")]
    Unbalanced { net: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("grid mismatch: expected {expected:?}, found {found:?}")]
    GridMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_sample(self, index: usize) -> Self {
        Error::Sample {
            index,
            source: Box::new(self),
        }
    }
}
