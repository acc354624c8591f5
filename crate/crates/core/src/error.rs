use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("shape mismatch: {context} (expected {expected}, got {actual})")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("label {label} out of range 0..={max} at pixel ({row}, {col})")]
    LabelOutOfRange {
        label: i64,
        max: usize,
        row: usize,
        col: usize,
    },

    #[error("non-finite value in {context}; rerun with NaN imputation enabled to replace with band means")]
    NonFinite { context: String },

    #[error("class {class} has {available} labeled pixels but {needed} are required")]
    InsufficientClassSamples {
        class: u16,
        available: usize,
        needed: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty sample set: {0}")]
    EmptySampleSet(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("training diverged: {context} became non-finite at step {step}")]
    Diverged { context: String, step: usize },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("unsupported npy file {path}: {reason}")]
    Npy { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
