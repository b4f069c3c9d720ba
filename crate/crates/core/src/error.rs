use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MptError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MptError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("token id {index} out of range for vocabulary of size {vocab}")]
    Vocabulary { index: usize, vocab: usize },

    #[error("sequence length {len} exceeds positional table length {max}")]
    Length { len: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("schema error at `{field}`: {detail}")]
    Schema { field: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MptError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        MptError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MptError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, detail: impl Into<String>) -> Self {
        MptError::Schema {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
