use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite after jitter ({context})")]
    NotPositiveDefinite { context: String },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("component {component} has dof {dof} <= {min}: variance undefined")]
    DofTooSmall { component: usize, dof: f64, min: f64 },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no collision-free path from {start:?}")]
    NoPath { start: Vec<f64> },

    #[error("variational fit diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("no feasible point found: {0}")]
    Infeasible(String),

    #[error("teacher failed: {0}")]
    Teacher(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn dim(expected: usize, found: usize) -> Self {
        Error::DimensionMismatch { expected, found }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
