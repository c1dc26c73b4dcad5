use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {got:?}")]
    LayerShape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("layer {layer}: {detail}")]
    Layer { layer: usize, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask for prunable layer {layer} has shape {got:?}, weight is {expected:?}")]
    MaskShape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("trace does not belong to this network: {0}")]
    TraceMismatch(String),

    #[error("invalid N:M pattern {n}:{m}")]
    InvalidPattern { n: usize, m: usize },

    #[error("rows are not probability distributions (row {row} sums to {sum})")]
    NotNormalized { row: usize, sum: f64 },

    #[error("empty stream: {0}")]
    Empty(&'static str),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checksum mismatch for {path}: expected {expected}, got {got}")]
    Checksum {
        path: PathBuf,
        expected: String,
        got: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
