use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("token id {id} out of range for a vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds the limit of {limit} positions")]
    SequenceTooLong { len: usize, limit: usize },
    #[error("feature dimension {found} does not match configured dimension {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("{0}: target mask is empty")]
    EmptyMask(&'static str),
    #[error("contrastive batch of {0} is too small, at least 2 samples are needed")]
    BatchTooSmall(usize),
    #[error("curriculum has already stopped")]
    CurriculumStopped,
    #[error("sequence of {0} tokens is too short, at least 2 are needed")]
    TooShort(usize),
    #[error("unknown image id `{0}`")]
    UnknownImage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("incompatible {what}: expected {expected}, found {found}")]
    Incompatible {
        what: &'static str,
        expected: String,
        found: String,
    },
}
