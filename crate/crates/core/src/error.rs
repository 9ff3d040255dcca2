use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("inconsistent assignment: {0}")]
    InconsistentAssignment(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("loss is undefined: {0}")]
    UndefinedLoss(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: u64, loss: f64 },

    #[error("gradient check failed: {count} coordinate(s) above tolerance, worst relative error {worst:.3e} at {location}")]
    GradientCheckFailed {
        count: usize,
        worst: f64,
        location: String,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
