use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss for sample `{sample}` view {view}")]
    NonFiniteLoss { sample: String, view: usize },

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("audio format error: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("container error in {path}: {detail}")]
    Container { path: PathBuf, detail: String },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
