//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible operand shapes for a graph primitive or layer.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// Input outside the mathematical domain of an operation (log of a
    /// non-positive value, sqrt of a negative value, non-finite result).
    #[error("domain error in {op}: {detail}")]
    Domain { op: String, detail: String },

    /// `backward` was asked to differentiate a non-scalar node.
    #[error("backward root must be scalar-shaped, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// A `wrt` node is not an ancestor of the backward root. Silent zero
    /// gradients would corrupt downstream cosine statistics, so this is
    /// always reported.
    #[error("node {node} is unreachable from the backward root")]
    Unreachable { node: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A label outside `[0, classes)` or a cosine outside `[-1, 1]`.
    #[error("value out of range: {0}")]
    OutOfRange(String),

    /// Statistics requested over fewer records than the estimator needs.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file (IDX, dataset, CSV/JSON export, checkpoint).
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Checkpoint version or checksum failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (non-finite loss and similar).
    #[error("training failed: {0}")]
    Train(String),
}

impl Error {
    pub(crate) fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
