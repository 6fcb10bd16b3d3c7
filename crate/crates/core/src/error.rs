use std::path::PathBuf;

use crate::pruners::TrainLog;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} implies {expected} values, got {actual}")]
    InvalidTensor {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("backward already ran on this tape; rebuild the graph")]
    BackwardAlreadyRun,

    #[error("non-finite gradient at {context}")]
    NonFiniteGradient { context: String },

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged {
        iteration: usize,
        loss: f64,
        log: Box<TrainLog>,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("group {0} has no samples")]
    EmptyGroup(&'static str),

    #[error("batch contains a single sensitive group")]
    SingleGroupBatch,

    #[error("dataset contains a single sensitive group")]
    SingleGroupData,

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid surrogate: {0}")]
    InvalidSurrogate(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("stratum (label {label}, group {group}) has {count} samples, fewer than {splits} splits")]
    SmallStratum {
        label: i8,
        group: &'static str,
        count: usize,
        splits: usize,
    },

    #[error("zero connection sensitivity on two consecutive batches")]
    ZeroSensitivity,

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {context}: {source}")]
    Csv {
        context: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            context: path.into(),
            source,
        }
    }
}
