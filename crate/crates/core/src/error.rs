use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    RawIo(#[from] std::io::Error),

    #[error("malformed delimited text: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("file {0} is empty")]
    EmptyFile(PathBuf),

    #[error("row {row} has {found} cells, header has {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("column `{0}` is not present in the table header")]
    MissingColumn(String),

    #[error("column `{0}` is assigned more than one role in the schema")]
    DuplicateRole(String),

    #[error("row {row}: cannot parse date `{value}`")]
    BadDate { row: usize, value: String },

    #[error("unknown rating grade `{0}`")]
    UnknownGrade(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("only one class present; {0} is undefined")]
    SingleClass(&'static str),

    #[error("feature `{0}` needs binary targets (weight of evidence or usefulness screen)")]
    MissingTargets(String),

    #[error("feature `{feature}` still missing at row {row} after imputation")]
    UnimputedValue { feature: String, row: usize },

    #[error("non-finite feature value in column {column} at row {row}")]
    NonFiniteFeature { row: usize, column: usize },

    #[error("need at least {needed} distinct periods, found {found}")]
    TooFewPeriods { needed: usize, found: usize },

    #[error("fold {fold} has an empty {split} split")]
    EmptySplit { fold: usize, split: &'static str },

    #[error("feature columns do not match the model: {0}")]
    ColumnMismatch(String),

    #[error("operation requires a log-loss model")]
    NotClassifier,

    #[error("dimension mismatch for `{id}`: expected {expected}, got {found}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("zero-norm query vector under cosine similarity")]
    ZeroNormQuery,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("only {valid} valid bootstrap resamples out of {requested}")]
    TooFewResamples { valid: usize, requested: usize },

    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),

    #[error("manifest is incomplete: missing stage `{0}`")]
    IncompleteManifest(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
