//! Error type shared by the forward/inverse kernel.

/// Errors produced by mesh construction, FEM solves, and dataset I/O.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A solve or factorization broke down (loss of positive definiteness,
    /// non-finite values, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Underlying filesystem failure.
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    /// A file exists but does not parse as the expected format.
    #[error("malformed data: {0}")]
    Format(String),
    /// JSON (de)serialization failure.
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }
}
