use std::path::PathBuf;

use nutrifuse_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("unknown ingredient `{0}`")]
    UnknownIngredient(String),

    #[error("data error for {context}: {detail}")]
    Data { context: String, detail: String },

    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn data(context: impl Into<String>, detail: impl ToString) -> Self {
        Error::Data { context: context.into(), detail: detail.to_string() }
    }
}
