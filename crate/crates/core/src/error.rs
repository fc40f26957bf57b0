use thiserror::Error;

pub type Result<T> = std::result::Result<T, NeatError>;

#[derive(Debug, Error)]
pub enum NeatError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not an embedding archive")]
    NotAnArchive,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("corrupted file: {0}")]
    Corrupted(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no negation cue found in caption {0:?}")]
    NoNegationFound(String),

    #[error("llm request failed: {0}")]
    Llm(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NeatError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NeatError::InvalidArgument(msg.into())
    }

    /// True for errors caused by NaN/Inf during numerical work.
    pub fn is_numerical(&self) -> bool {
        matches!(self, NeatError::NonFinite(_))
    }
}
