use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's input contract (shape, size, emptiness).
    #[error("input contract violated: {0}")]
    Contract(String),
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("non-finite loss at phase {phase} step {step}: {dump}")]
    NonFiniteLoss { phase: String, step: usize, dump: String },
    #[error("{path}: {source}")]
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

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
