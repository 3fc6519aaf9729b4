use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the extraction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("cannot train a merge table on an empty corpus")]
    EmptyCorpus,

    #[error("query needs {needed} pieces but the sequence cap is {cap}")]
    QueryTooLong { needed: usize, cap: usize },

    #[error("empty {0} text")]
    EmptyText(&'static str),

    #[error("invalid span ({start}, {end}): {reason}")]
    InvalidSpan {
        start: usize,
        end: usize,
        reason: &'static str,
    },

    #[error("piece id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },

    #[error("{what} mismatch: expected {expected}, found {found}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("inconsistent configuration: {0}")]
    Config(String),

    #[error("bad format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Record {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("entity type `{0}` has no query")]
    UnknownType(String),

    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
