//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received an extent it cannot work with. `dim` names
    /// the offending dimension.
    #[error("{op}: {dim} mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: produced non-finite {what}")]
    NonFinite { op: &'static str, what: String },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    /// OKS is undefined when the ground-truth instance has no labeled joints.
    #[error("oks: ground truth has no labeled joints")]
    UndefinedOks,

    #[error("config: {0}")]
    Config(String),

    /// A record inside an annotation / detection / results file is malformed.
    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },

    #[error("category map: joint {target} mapped more than once")]
    DuplicateMapTarget { target: usize },

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn non_finite(op: &'static str, what: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            what: what.into(),
        }
    }
}
