use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the relighting stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A parameter outside its allowed domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Required state (checkpoint, dataset) is missing or unusable.
    #[error("state error: {0}")]
    State(String),

    /// Malformed bytes in one of the on-disk formats.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
