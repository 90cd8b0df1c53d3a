//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or parameter shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value became non-finite or a numeric guard tripped.
    #[error("numerics error: {0}")]
    Numerics(String),

    /// A caller violated an API contract (precondition).
    #[error("contract error: {0}")]
    Contract(String),

    /// The scene partition is inconsistent (bad tiling, empty block, duplicate ownership).
    #[error("partition error: {0}")]
    Partition(String),

    /// Configuration failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// File I/O failure, with the offending path.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file was syntactically or structurally malformed.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn numerics(msg: impl Into<String>) -> Self {
        Error::Numerics(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn partition(msg: impl Into<String>) -> Self {
        Error::Partition(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
