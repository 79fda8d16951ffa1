use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("config parse error at `{path}` (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("degenerate selection: token {token} has no experts to aggregate (need num_experts > top_k)")]
    DegenerateSelection { token: usize },
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("parameter `{name}` does not match: {detail}")]
    Mismatch { name: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
