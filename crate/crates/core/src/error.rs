use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),

    #[error("model dim {dim} is not divisible by {heads} heads")]
    InvalidHeads { dim: usize, heads: usize },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("lead {lead} has zero variance")]
    ZeroVarianceLead { lead: usize },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint was written for a different model configuration")]
    ConfigDigestMismatch,

    #[error("signal too short: {duration_s:.3} s (need at least {min_s} s)")]
    TooShortSignal { duration_s: f64, min_s: f64 },

    #[error("no R-peaks found")]
    NoPeaksFound,

    #[error("need at least 2 R-peaks, found {found}")]
    InsufficientPeaks { found: usize },

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("batch has no targets for any task")]
    EmptyBatch,

    #[error("loss diverged (non-finite) at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
