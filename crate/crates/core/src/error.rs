use thiserror::Error;

/// Errors surfaced by the engine. Each variant maps to a stable machine-readable kind.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid position: {0}")]
    InvalidPosition(String),
    #[error("insufficient pilot budget: {0}")]
    InsufficientBudget(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::IndexOutOfRange(_) => "index_out_of_range",
            Error::InvalidPosition(_) => "invalid_position",
            Error::InsufficientBudget(_) => "insufficient_budget",
            Error::MissingInput(_) => "missing_input",
            Error::HashMismatch(_) => "hash_mismatch",
            Error::Diverged(_) => "diverged",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
