use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// NaN/Inf detected in an input or a loss.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("malformed file: {0}")]
    Format(String),

    /// Checkpoint written for a different model configuration or format version.
    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Prefix the message of a configuration error; other kinds pass through.
    pub fn context(self, prefix: impl std::fmt::Display) -> Self {
        match self {
            Error::Config(msg) => Error::Config(format!("{prefix}: {msg}")),
            other => other,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Config(_) | Error::Usage(_) => 1,
            Error::Numeric(_) => 2,
            Error::Format(_) | Error::Version(_) | Error::Io(_) => 3,
        }
    }
}
