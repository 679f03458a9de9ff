use std::io;
use std::path::PathBuf;

use crate::latent_model::Method;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("event log is empty")]
    EmptyLog,

    #[error("no users left after filtering (min purchases {min_purchases}, min clicks {min_clicks})")]
    EmptyResult { min_purchases: usize, min_clicks: usize },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("unknown {what} id `{id}`")]
    UnknownId { what: &'static str, id: String },

    #[error("method {0} is not a pairwise method")]
    UnsupportedMethod(Method),

    #[error("invalid pair sample: winner and loser are both item {0}")]
    InvalidSample(u32),

    #[error("no user has an active pair relation for {0}; nothing to train on")]
    Untrainable(Method),

    #[error("parameters became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("singular normal equations while solving {side} row {row}; use lambda > 0 to regularize")]
    Singular { side: &'static str, row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot split user `{user}`: needs at least 2 purchases, has {count}")]
    Split { user: String, count: usize },

    #[error("no user has a test purchase among their candidate items")]
    NoEvaluableUsers,

    #[error("ranking has no relevant items")]
    NoRelevant,

    #[error("AUC undefined: ranking has no non-relevant candidates")]
    UndefinedAuc,

    #[error("{path}: not a model checkpoint (bad magic)")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported checkpoint version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: checkpoint length mismatch (expected {expected} bytes, found {actual})")]
    LengthMismatch { path: PathBuf, expected: u64, actual: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::EmptyLog | Error::EmptyResult { .. } | Error::Split { .. } => "data",
            Error::IndexOutOfRange { .. } | Error::UnknownId { .. } => "index",
            Error::UnsupportedMethod(_) | Error::Config(_) => "config",
            Error::InvalidSample(_) => "sample",
            Error::Untrainable(_) => "untrainable",
            Error::Divergence { .. } | Error::Singular { .. } => "numeric",
            Error::NoEvaluableUsers | Error::NoRelevant | Error::UndefinedAuc => "evaluation",
            Error::BadMagic { .. } => "checkpoint-magic",
            Error::UnsupportedVersion { .. } => "checkpoint-version",
            Error::LengthMismatch { .. } => "checkpoint-length",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
