use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator, solvers and loaders.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two vectors that must agree in length do not.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A data file does not follow its binary format.
    #[error("format error in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    /// Experiment configuration could not be parsed or is inconsistent.
    #[error("config error at {field}: {reason}")]
    Config { field: String, reason: String },

    /// A learning-rate schedule breaks the step-size condition of a bound.
    #[error("step-size condition violated at round {round}: eta = {eta}, limit = {limit}")]
    StepSize { round: usize, eta: f64, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
