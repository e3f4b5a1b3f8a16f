use thiserror::Error;

use crate::diffcore::DiffError;
use crate::hierarchy::HierarchyError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numeric failure at epoch {epoch} while evaluating {term}: {source}")]
    Training {
        epoch: usize,
        term: &'static str,
        source: DiffError,
    },
    #[error("no fine sample with coarse label {coarse} to estimate its correction")]
    DegenerateFold { coarse: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
