use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),

    #[error("degenerate hand: max pairwise distance {max_distance:e} is below {threshold:e}")]
    DegenerateHand { max_distance: f64, threshold: f64 },

    #[error("npy format error in `{field}`: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("split file invalid: {0}")]
    InvalidSplit(String),

    #[error("insufficient classes: need {needed}, only {available} eligible")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("insufficient samples in class {class_id}: need {needed}, have {available}")]
    InsufficientSamples {
        class_id: usize,
        needed: usize,
        available: usize,
    },

    #[error("train-mode batchnorm needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("stale or mismatched forward cache: {0}")]
    Cache(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("no anchor has a positive pair")]
    NoPositives,

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("degenerate problem: {0}")]
    DegenerateProblem(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            field,
            detail: detail.into(),
        }
    }
}
