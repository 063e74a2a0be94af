use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Element count does not match the requested shape.
    #[error("size error: expected {expected} elements, got {actual}")]
    Size { expected: usize, actual: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// A layer or block description is internally inconsistent.
    #[error("spec error: {0}")]
    Spec(String),

    #[error("value error: {0}")]
    Value(String),

    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },

    /// Weights could not be bound to a graph's parameter slots.
    #[error("binding error: missing [{}], mismatched [{}]", missing.join(", "), mismatched.join(", "))]
    Binding {
        missing: Vec<String>,
        mismatched: Vec<String>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
