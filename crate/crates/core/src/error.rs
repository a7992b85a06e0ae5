use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("schema error in {context}: {message}")]
    Schema { context: String, message: String },

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("parse error at {}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("non-finite value at {}:{line}:{column}", path.display())]
    NonFinite {
        path: PathBuf,
        line: usize,
        column: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("degenerate column(s): {}", regions.join(", "))]
    DegenerateColumn { regions: Vec<String> },

    #[error("length {0} is not Q(Q-1)/2 for any region count Q")]
    Length(usize),

    #[error("too few subjects: {n} (need at least {min})")]
    TooFewSubjects { n: usize, min: usize },

    #[error("missing reference estimate for subject {0}")]
    MissingReference(String),

    #[error("empty cell: {0}")]
    EmptyCell(String),

    #[error("invalid params: field `{field}`: {message}")]
    InvalidParams { field: String, message: String },

    #[error("subject {subject} has no visit {visit}")]
    MissingVisit { subject: String, visit: u8 },

    #[error("missing run artifacts: {0}")]
    MissingRun(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
