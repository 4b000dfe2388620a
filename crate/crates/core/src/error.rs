use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient instances: need at least {needed}, have {available}")]
    InsufficientInstances { needed: usize, available: usize },

    #[error("degenerate prototype: zero norm")]
    DegeneratePrototype,

    #[error("training diverged on bag {bag_id}: non-finite loss")]
    Divergence { bag_id: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("inconsistent feature dimension: manifest uses d={expected}, bag {bag_id} has d={found}")]
    InconsistentDimension {
        bag_id: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate bag id {0}")]
    DuplicateBagId(String),

    #[error("{path}: bad format: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: truncated: expected {expected} bytes of data, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("too few bags: {0}")]
    TooFewBags(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Fold(String, #[source] Box<Error>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_fold(self, fold_id: usize) -> Self {
        Error::Fold(format!("fold {fold_id}"), Box::new(self))
    }
}
