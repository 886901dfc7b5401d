use std::path::PathBuf;

use crate::autograd::GraphError;
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {seq} exceeds max_seq {max}")]
    SeqTooLong { seq: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("filter: {0}")]
    Filter(String),
    #[error(
        "marker collision: model extent {extent} ({source_name}) clashes with marker value {marker}; \
         pick different primes (e.g. --bsz-marker/--seq-marker or --auto-markers)"
    )]
    MarkerCollision {
        extent: usize,
        source_name: String,
        marker: usize,
    },
    #[error("ambiguous extent {value} in {location}: {reason}")]
    Ambiguous {
        value: usize,
        location: String,
        reason: String,
    },
    #[error("structure hash mismatch: plan was built for {plan}, tape is {tape}")]
    HashMismatch { plan: String, tape: String },
    #[error("plan entry at node {ordinal} ({node_type}) attribute {attribute}: {reason}")]
    PlanEntry {
        ordinal: usize,
        node_type: String,
        attribute: String,
        reason: String,
    },
    #[error("non-finite {what}")]
    NonFinite { what: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
