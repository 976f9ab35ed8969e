use thiserror::Error;

/// Errors produced by the shape-control library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("joint limits violated at indices {indices:?}")]
    BoundViolation { indices: Vec<usize> },

    #[error("numeric fault in {stage} (index {index})")]
    NumericFault { stage: &'static str, index: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("infeasible plan: {0}")]
    InfeasiblePlan(String),

    #[error("internal fault: {0}")]
    Internal(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
