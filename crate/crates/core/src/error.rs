use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("inconsistent labeling")]
    InconsistentLabeling,

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training data covers fewer than two classes.
    #[error("degenerate training data: {0}")]
    Degenerate(String),

    #[error("budget too small: no visited children at the root")]
    BudgetTooSmall,

    #[error("reference set too small: {found} words above threshold, need at least 3")]
    ReferenceSetTooSmall { found: usize },

    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("scorer failure: {0}")]
    Scorer(String),

    /// A bridge response that could not be used. `raw` is the offending line.
    #[error("bridge protocol error: {message} (raw response: {raw:?})")]
    BridgeProtocol { message: String, raw: String },

    #[error("bridge timed out after {0:?}")]
    BridgeTimeout(std::time::Duration),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    IoBare(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable identifier, used by the CLI's `error_code: message` lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyCorpus => "empty_corpus",
            Error::MalformedLine { .. } => "malformed_line",
            Error::InconsistentLabeling => "inconsistent_labeling",
            Error::InvalidCorpus(_) => "invalid_corpus",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Degenerate(_) => "degenerate_input",
            Error::BudgetTooSmall => "budget_too_small",
            Error::ReferenceSetTooSmall { .. } => "reference_set_too_small",
            Error::InsufficientCorpus(_) => "insufficient_corpus",
            Error::UnknownClass(_) => "unknown_class",
            Error::Scorer(_) => "scorer_failure",
            Error::BridgeProtocol { .. } => "bridge_protocol",
            Error::BridgeTimeout(_) => "bridge_timeout",
            Error::Io { .. } | Error::IoBare(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
