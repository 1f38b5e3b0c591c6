use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has zero norm and cannot be normalized")]
    ZeroVector(usize),

    #[error("rank deficient: {needed} components requested but only {found} eigenvalues exceed epsilon")]
    RankDeficient { needed: usize, found: usize },

    #[error("bad synthetic spec: {0}")]
    BadSpec(String),

    #[error("bad magic bytes at offset 0 (expected {expected:?})")]
    BadMagic { expected: &'static str },

    #[error("truncated file: expected {expected} bytes, found {found} (data ends at byte offset {found})")]
    TruncatedFile { expected: u64, found: u64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("k = {k} is too large for {n} items")]
    KTooLarge { k: usize, n: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("not converged after {iterations} iterations (last change {delta:.3e})")]
    NotConverged { iterations: usize, delta: f64 },

    #[error("dense oracle refused: n = {n} exceeds limit {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("labels are required but missing")]
    LabelsMissing,

    #[error("every anchor has empty positive and negative pools")]
    AllPoolsEmpty,

    #[error("embedding output has (near) zero norm before normalization")]
    DegenerateOutput,

    #[error("training diverged: mean loss is not finite at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("degenerate labels: all items share a single label")]
    DegenerateLabels,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach the offending path to an error raised while reading or writing it.
    pub fn at(self, path: impl Into<PathBuf>) -> Error {
        match self {
            e @ (Error::File { .. } | Error::Parse { .. }) => e,
            e => Error::File {
                path: path.into(),
                source: Box::new(e),
            },
        }
    }
}
