use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("budget exceeds entries: budget {budget}, entries {entries}")]
    BudgetExceedsEntries { budget: usize, entries: usize },

    #[error("pooling kernel must be odd and >= 1, got {0}")]
    InvalidKernel(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate mask: kept attention mass is zero")]
    DegenerateMask,

    #[error("stage masks overlap at entry {0}")]
    OverlappingMasks(usize),

    #[error("instance too large for oracle: n = {n}, limit {limit}")]
    OracleTooLarge { n: usize, limit: usize },

    #[error("budget below window: budget {budget}, window {window}")]
    BudgetBelowWindow { budget: usize, window: usize },

    #[error("window exceeds entries: window {window}, entries {entries}")]
    WindowExceedsEntries { window: usize, entries: usize },

    #[error("observation window {window} needs {window} query rows, head has {rows}")]
    WindowExceedsQueries { window: usize, rows: usize },

    #[error("infeasible allocation: {0}")]
    InfeasibleAllocation(String),

    #[error("not a HeadDump: {path}")]
    NotAHeadDump { path: PathBuf },

    #[error("unsupported HeadDump version {found} in {path} (supported: {supported:?})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: &'static [u32],
    },

    #[error("truncated or oversized HeadDump {path}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value in {tensor} of {path}")]
    NonFinitePayload { path: PathBuf, tensor: &'static str },

    #[error("malformed report {path}: {message}")]
    Report { path: PathBuf, message: String },

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
