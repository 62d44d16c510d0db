use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] latentlab_core::Error),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("tape: {0}")]
    Tape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Training produced a NaN or infinite objective.
    #[error("non-finite {what} in epoch {epoch}")]
    Diverged { epoch: usize, what: String },

    #[error("did not converge: {0}")]
    NoConvergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
