use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point cloud")]
    EmptyCloud,

    #[error("non-finite coordinate at point {0}")]
    NonFinitePoint(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("no confident correspondences")]
    NoConfidentCorrespondences,

    #[error("degenerate configuration")]
    Degenerate,

    #[error("input too sparse: {0} keypoints")]
    InputTooSparse(usize),

    #[error("no hypothesis with at least 3 inliers")]
    NoHypothesis,

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
