//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by flows, contrasts, estimators and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// The deterministic flow or a simulated path left finite range.
    #[error("state left finite range during integration")]
    NonFiniteState,

    /// A covariance matrix failed positive-definiteness even after one
    /// ridge repair.
    #[error("covariance matrix not positive definite after ridge repair")]
    SingularCovariance,

    /// The optimizer hit its iteration cap from every start point.
    #[error("optimizer failed to converge from any start")]
    NoConvergence,

    /// A jump-process MLE exposure integral was zero.
    #[error("zero exposure time in jump-process MLE ({0})")]
    ZeroExposure(&'static str),

    /// Invalid configuration or invalid argument combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Mismatched dimensions between model, path, box or parameters.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used by validation code.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand for dimension mismatches.
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
