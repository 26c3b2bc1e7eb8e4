use thiserror::Error;

/// Errors produced by model construction, inference, learning and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on the arguments was violated (dimension mismatch,
    /// missing class, infeasible configuration, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical operation failed (non-positive-definite covariance,
    /// forward-pass underflow, singular normal equations).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An internal consistency check failed; this signals a bug, not bad input.
    #[error("internal error: {0}")]
    Internal(String),

    /// A file could not be parsed as JSON.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A file parsed as JSON but violated the expected schema.
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
