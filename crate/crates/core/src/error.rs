use std::path::PathBuf;

use occ_tensor::TensorError;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {msg}", path.display())]
    File { path: PathBuf, msg: String },
    #[error("training diverged at step {step} (seed {seed}): {msg}")]
    Diverged { seed: u64, step: usize, msg: String },
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl CoreError {
    pub fn file(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        CoreError::File {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}
