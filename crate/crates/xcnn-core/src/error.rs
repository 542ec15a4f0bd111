use alloc::string::String;
use alloc::vec::Vec;

/// Crate-wide error type.  Shape problems carry both sides of the mismatch so
/// the message alone is enough to debug a mis-wired graph.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?} but got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: expected a scalar output, got shape {got:?}")]
    NotScalar { op: &'static str, got: Vec<usize> },

    #[error("tensor id {0} is not on this tape")]
    UnknownTensor(usize),

    #[error("no gradient recorded for tensor id {0}; run backward first and make sure the tensor tracks gradients")]
    GradMissing(usize),

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("dataset is empty ({context})")]
    EmptyDataset { context: String },

    #[error("unknown layer or parameter name `{0}`")]
    UnknownName(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shapes(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
