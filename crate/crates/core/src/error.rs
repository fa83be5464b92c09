//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error ({path} line {line}): {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub fn shape_mismatch(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
