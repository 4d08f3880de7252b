use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("task id required for per-task heads")]
    MissingTaskId,

    #[error("task id {task_id} has no head (head count {head_count})")]
    UnknownHead { task_id: usize, head_count: usize },

    #[error("label {label} out of range for {class_count} classes")]
    LabelOutOfRange { label: usize, class_count: usize },

    #[error("empty example set")]
    EmptyExamples,

    #[error("degenerate complement: no examples left outside the compression sets")]
    DegenerateComplement,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{classes} classes are not divisible into groups of {per_task}")]
    Divisibility { classes: usize, per_task: usize },

    #[error("input of dimension {0} is not a square grid")]
    NonSquareInput(usize),

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: truncated file")]
    Truncated { path: PathBuf },

    #[error("malformed csv: {0}")]
    Csv(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("record incompatible with config: {0}")]
    Incompatible(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
