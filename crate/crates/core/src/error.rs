use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the normalization floor")]
    ZeroVector { norm: f64 },
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("malformed file at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("no background pixels to cluster")]
    NoBackground,
    #[error("prototype slot {0} is not consumed")]
    NotConsumed(usize),
    #[error("label {0} is not covered by the classifier")]
    UnknownLabel(u32),
    #[error("mask shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("need {needed} unconsumed prototypes, only {available} available")]
    InsufficientPrototypes { needed: usize, available: usize },
    #[error("assignment infeasible: {rows} rows > {cols} columns")]
    Infeasible { rows: usize, cols: usize },
    #[error("class {0} has no pixels in the support set")]
    NoPixels(u32),
    #[error("class {0} has no prototype selection")]
    NoSelection(u32),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
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
}
