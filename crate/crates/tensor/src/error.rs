use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced at node {node} ({path})")]
    NonFinite {
        op: &'static str,
        node: usize,
        path: String,
    },

    #[error("{op}: attention needs at least one key")]
    EmptyKeys { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter `{0}` is frozen")]
    Frozen(String),

    #[error("tensor file: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        TensorError::Io(e.to_string())
    }
}

pub(crate) fn dim_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        msg: msg.into(),
    }
}
