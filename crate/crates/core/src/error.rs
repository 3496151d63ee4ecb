//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input text (dataset files, configs).
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A configuration value failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// A payload could not be decoded against the expected layout.
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    /// A metric is undefined for the given inputs (e.g. zero norm in a cosine).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
