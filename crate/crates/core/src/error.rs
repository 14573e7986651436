use thiserror::Error;

/// Errors raised by the surrogate, sampler and design machinery.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BodeError {
    /// A parameter violated its domain (non-positive lengthscale, sigma, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Bad argument shape or range supplied by the caller.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A covariance matrix stayed indefinite after the largest jitter.
    #[error("matrix not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    /// Every eigenvalue of the conditional covariance is below tolerance.
    #[error("degenerate posterior: largest eigenvalue {largest:e} below tolerance")]
    DegeneratePosterior { largest: f64 },

    /// The HMC sampler diverged on too many trajectories during burn-in.
    #[error("sampler diverged on {divergent} of {burn_in} burn-in trajectories")]
    Sampler { divergent: usize, burn_in: usize },

    /// The black-box oracle failed to return a value.
    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for BodeError {
    fn from(e: std::io::Error) -> Self {
        BodeError::Io(e.to_string())
    }
}

impl From<csv::Error> for BodeError {
    fn from(e: csv::Error) -> Self {
        BodeError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, BodeError>;
