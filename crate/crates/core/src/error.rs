//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shape disagreement; reports the operation and both shapes involved.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Domain or precondition violation (invalid configuration, bad value range, ...).
    #[error("invalid input: {0}")]
    Validation(String),

    /// Malformed CSV content, located by path and 1-based line number.
    #[error("{path}:{line}: {msg}")]
    Csv { path: String, line: usize, msg: String },

    /// Underlying I/O failure, annotated with the file involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A numeric path produced or received a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
