use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("evaluation failure: {0}")]
    EvaluationFailure(String),
    #[error("unsupported state dimension {got} (only d = {supported} is implemented)")]
    UnsupportedDimension { got: usize, supported: usize },
    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("invalid measure at macro cell {x_cell}, cell-variable cell {y_cell}: {reason}")]
    InvalidMeasure {
        x_cell: usize,
        y_cell: usize,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
