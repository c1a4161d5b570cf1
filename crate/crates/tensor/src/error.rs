use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("numeric integrity violated in {op}: {detail}")]
    NumericIntegrity { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tensor file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Degenerate { op, detail: detail.into() }
    }
}
