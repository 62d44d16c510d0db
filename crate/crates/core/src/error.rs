use thiserror::Error;

/// Errors raised by model fitting, inference and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("objective decreased at iteration {iter}: {previous} -> {current}")]
    NonMonotone { iter: usize, previous: f64, current: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero-probability observation: {0}")]
    ZeroProbability(String),

    #[error("did not converge: {0}")]
    NoConvergence(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
