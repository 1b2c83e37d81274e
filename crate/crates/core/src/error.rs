use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("step size underflow at t = {t:.9} s (h = {h:.3e} s)")]
    StiffnessFailure { t: f64, h: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("ill-posed subdomain problem: {0}")]
    IllPosed(String),

    #[error("subdomain {index} failed: {reason}")]
    SubdomainFailure { index: usize, reason: String },

    #[error("ensemble failed: {failed} of {total} replicates did not converge")]
    EnsembleFailure { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
