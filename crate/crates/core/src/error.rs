use thiserror::Error;

/// Errors produced by the algorithms in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A gridworld or experiment specification violates its invariants.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative solver ran out of iterations before reaching its tolerance.
    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    /// Gradient-based fitting produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
