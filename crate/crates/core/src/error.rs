//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("gather: index {index} out of vocabulary range {vocab}")]
    GatherOutOfRange { index: usize, vocab: usize },

    #[error("backprop root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("invalid pmf: {reason}")]
    InvalidPmf { reason: String },

    #[error("empty negative set")]
    EmptyNegatives,

    #[error("empty feature pool")]
    EmptyPool,

    #[error("input out of domain: {0}")]
    Domain(String),

    #[error("exact enumeration support too large: {size} states exceeds limit {limit}")]
    SupportTooLarge { size: u128, limit: u128 },

    #[error("corpus config invalid: {0}")]
    CorpusConfig(String),

    #[error("could not place synonym-set centroids with pairwise distance >= 3*epsilon after {attempts} attempts; try a larger dimension or a smaller epsilon")]
    CentroidPlacement { attempts: usize },

    #[error("{path}: malformed record at line {line}: {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: non-finite loss ({diagnostic})")]
    NonFiniteLoss { step: usize, diagnostic: String },

    #[error("config: {0}")]
    Config(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
