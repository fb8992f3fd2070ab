use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("softmax over an empty mask")]
    EmptyMask,

    #[error("cosine of a zero vector")]
    ZeroVector,

    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("graph validation failed: {0}")]
    Validation(String),

    #[error("meta-path {path:?} is not type-consistent: {reason}")]
    TypeInconsistent { path: Vec<String>, reason: String },

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown distribution `{0}`")]
    UnknownDistribution(String),

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("empty meta-path set")]
    EmptyMetaPathSet,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("multi-label input error: {0}")]
    Labels(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: [usize; 2], right: [usize; 2]) -> Self {
        Error::ShapeMismatch { op, left, right }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error signals a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Divergence { .. })
    }
}
