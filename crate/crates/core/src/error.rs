use thiserror::Error;

/// Errors produced by the symq library.
#[derive(Debug, Error)]
pub enum SymqError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("value iteration did not converge after {sweeps} sweeps (last residual {residual:e})")]
    ConvergenceFailure { sweeps: usize, residual: f64 },

    #[error("controller undefined in sink cell {0}")]
    ControllerUndefined(usize),

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = SymqError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> SymqError {
    SymqError::InvalidArgument(msg.into())
}
