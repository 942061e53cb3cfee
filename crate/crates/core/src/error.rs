use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KgcmError>;

#[derive(Debug, Error)]
pub enum KgcmError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing embedding for text id `{0}`")]
    MissingEmbedding(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl KgcmError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        KgcmError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        KgcmError::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KgcmError::Io {
            path: path.into(),
            source,
        }
    }
}
