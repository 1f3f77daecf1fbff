use std::path::PathBuf;

use crate::pipeline::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("record {record}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        record: usize,
        found: u32,
        expected: u32,
    },

    #[error("record {record}: dimension mismatch in {field}: expected {expected}, found {found}")]
    DimensionMismatch {
        record: usize,
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("record {record}: corrupt record: {reason}")]
    CorruptRecord { record: usize, reason: String },

    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got a {rows}x{cols} tensor")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown environment '{0}'")]
    UnknownEnv(String),

    #[error("environment '{env}' does not support init mode {mode}")]
    UnsupportedInitMode { env: String, mode: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step} (batch {batch_id}): {reason}")]
    TrainingAborted {
        step: usize,
        batch_id: u64,
        reason: String,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}
