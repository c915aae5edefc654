use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: length {len} is not a multiple of chunk size {chunk}; pad the input first")]
    NotDivisible {
        op: &'static str,
        len: usize,
        chunk: usize,
    },
    #[error("{op}: row {row} has no visible entries")]
    EmptyRow { op: &'static str, row: usize },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    OutOfVocab { token: usize, vocab: usize },
    #[error("every target position is ignored")]
    NoTargets,
    #[error("score for group {group}, chunk {chunk} is NaN")]
    NanScore { group: usize, chunk: usize },
    #[error("saved state does not match the backward call: {0}")]
    StaleState(&'static str),
    #[error("config: {0}")]
    Config(String),
    #[error("task does not fit: needs {needed} positions, sequence has {available}")]
    Capacity { needed: usize, available: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
