use crate::rec::{ItemId, UserId};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("column {column}: {message}")]
    FfmParse { column: usize, message: String },

    #[error("class `{0}` has no high-level ancestor")]
    OrphanClass(String),

    #[error("unknown ontology class `{0}`")]
    UnknownClass(String),

    #[error("unknown item {0}")]
    UnknownItem(ItemId),

    #[error("unknown user {0}")]
    UnknownUser(UserId),

    #[error("duplicate {what} {id}")]
    Duplicate { what: &'static str, id: String },

    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("non-finite training loss at epoch {epoch}; learning rate {learning_rate} is likely too high")]
    NonFiniteLoss { epoch: usize, learning_rate: f64 },

    #[error("model is not trained")]
    Untrained,

    #[error("event log gap: expected sequence {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
