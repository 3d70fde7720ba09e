use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum DgpError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at round {round}: {detail}")]
    Diverged { round: usize, detail: String },

    #[error("attack not applicable: {0}")]
    AttackInapplicable(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DgpError>;
