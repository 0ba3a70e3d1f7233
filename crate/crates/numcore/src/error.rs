use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumError>;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{what}: non-finite value at index {index}")]
    NonFinite { what: String, index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing entry `{0}`")]
    Missing(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NumError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NumError::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        NumError::Format(msg.into())
    }
}
