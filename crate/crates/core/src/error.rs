//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("conjugate gradient did not converge within {iters} iterations (relative residual {rel_residual:.3e})")]
    SolverDiverged { iters: usize, rel_residual: f64 },

    #[error("non-finite loss during {context}; last good alpha = {last_alpha:?}")]
    NonFiniteLoss {
        context: String,
        last_alpha: Vec<f64>,
    },

    #[error("sample {index}: {source}")]
    Sample { index: usize, source: Box<Error> },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
