//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A request exceeded a hard size limit (system size, dimension).
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// An iterative routine failed to reach its tolerance.
    #[error("failed to converge: {0}")]
    NonConvergence(String),

    /// Measurement data does not cover a requested estimate.
    #[error("insufficient measurement coverage: {0}")]
    Coverage(String),

    /// Serialized data is malformed or has an unsupported version.
    #[error("data format error: {0}")]
    Format(String),

    #[error("linear algebra backend error: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),

    #[error("tensor shape error: {0}")]
    Shape(#[from] ndarray::ShapeError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
