use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HdhpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HdhpError {
    /// An argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("event stream is empty")]
    EmptyStream,

    #[error("events are not sorted by time: event {index} at {time} precedes {previous}")]
    Unsorted { index: usize, time: f64, previous: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("word `{0}` is not in the model vocabulary")]
    UnknownWord(String),

    #[error("snapshot format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HdhpError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        HdhpError::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HdhpError::Io {
            path: path.into(),
            source,
        }
    }
}
