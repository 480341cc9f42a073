use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{0}: file contains no data rows")]
    EmptyFile(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "exact enumeration refused for n = {n}, d = {d} (allowed when n <= 25 or d <= 3); \
         sample the arrangements instead"
    )]
    EnumerationTooLarge { n: usize, d: usize },

    #[error("count bound requires m1 * r <= n, got m1 = {m1}, r = {r}, n = {n}")]
    BoundAssumption { n: usize, r: usize, m1: usize },

    #[error("non-finite objective in stage {stage} at iteration {iter}")]
    Diverged { stage: String, iter: usize },

    #[error("non-finite SGD loss at epoch {epoch}")]
    SgdDiverged { epoch: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
