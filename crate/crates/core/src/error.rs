use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension error: {0}")]
    Dim(String),

    #[error("frame count error: {0}")]
    Frame(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: format error: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: non-finite value at flat index {index}")]
    NonFinite { path: PathBuf, index: usize },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("alignment error: transcript of length {len} needs at least {required} frames, got {frames}")]
    Alignment {
        len: usize,
        required: usize,
        frames: usize,
    },

    #[error("training error at step {step}: {message} (records: {records:?})")]
    Training {
        step: u64,
        message: String,
        records: Vec<String>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line tool: 2 for usage/config
    /// problems, 3 for I/O and file-format problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
