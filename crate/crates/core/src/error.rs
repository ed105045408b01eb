//! Error type shared across the crate.

use std::path::PathBuf;

/// Convenience alias used by every fallible operation in this crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // The source is deliberately not part of the message: callers that
    // print error chains would otherwise show it twice.
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        /// 1-based line number within the file.
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("checkpoint error on {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
