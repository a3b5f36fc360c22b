//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SaopError {
    /// A rollout produced a non-finite state or running cost.
    #[error("integration diverged at t = {t}: non-finite state or cost")]
    IntegrationDiverged { t: f64 },

    /// The sampling covariance could not be factorized even after jitter.
    /// Inside the search loop this signals convergence, not failure.
    #[error("degenerate sampling distribution: {0}")]
    DegenerateDistribution(String),

    /// A constructor or operation was handed arguments outside its contract.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Vector or matrix dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, SaopError>;
