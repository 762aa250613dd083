use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("cannot decode image {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// An operation received an image of the wrong kind (e.g. luma where RGB is required).
    #[error("type error: {0}")]
    Type(String),

    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value appeared in a named tensor or loss term.
    #[error("numeric fault in `{0}`")]
    NumericFault(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
