use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("shape {0:?} has a zero extent")]
    EmptyShape(Vec<usize>),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to the live tape")]
    DetachedFromTape,
    #[error("degenerate output: {0}")]
    DegenerateOutput(String),
    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    InsufficientBatch(usize),

    #[error("target class {target} out of range for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },
    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotADistribution { row: usize, sum: f64 },
    #[error("class counts are all zero")]
    AllZeroCounts,
    #[error("expected {expected} class weights, got {got}")]
    WeightDimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("bad magic: {0}")]
    BadMagic(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("strict load failed: {0}")]
    StrictMismatch(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("volume has no foreground (max intensity is zero)")]
    AllBackground,
    #[error("degenerate bounding box: {0}")]
    DegenerateBBox(String),
    #[error("class {class} has {have} subjects, need at least {need}")]
    TooFewSubjects { class: String, have: usize, need: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("class {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
