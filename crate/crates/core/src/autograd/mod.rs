//! Tape-based reverse-mode differentiation with reflectable node attributes.

mod node;
mod ops;
mod rules;
mod tape;

pub use node::{
    AttrKind, AttrValue, AttributeRecord, Edge, FlopClass, GraphNode, NodeKind, ParamId,
    SavedValue, SavedVar, StaticAttr, INPUT_METADATA,
};
pub use ops::MASK_FILL;
pub use rules::{BackwardRule, RuleRegistry};
pub use tape::{
    EdgeTransform, Gradients, MacCount, NodeGradients, NodeSpec, StructureHash, Tape, Var,
};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("no backward rule registered for node type `{0}`")]
    MissingRule(NodeKind),
    #[error("no node with ordinal {0}")]
    UnknownOrdinal(usize),
    #[error("node {ordinal} has no attribute `{name}`")]
    UnknownAttribute { ordinal: usize, name: String },
    #[error("node {ordinal}: attribute `{name}` expects a {expected} value")]
    AttributeKind {
        ordinal: usize,
        name: String,
        expected: AttrKind,
    },
    #[error("node {ordinal}: attribute `{name}` would change rank from {old:?} to {new:?}")]
    RankChange {
        ordinal: usize,
        name: String,
        old: Vec<usize>,
        new: Vec<usize>,
    },
    #[error("node {ordinal} ({node_type}): `{attribute}` expects extent {expected:?} but found {actual:?}")]
    SavedSizeMismatch {
        ordinal: usize,
        node_type: NodeKind,
        attribute: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("node {ordinal} ({node_type}): incoming gradient has shape {actual:?}, metadata says {expected:?}")]
    MetadataMismatch {
        ordinal: usize,
        node_type: NodeKind,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("node {ordinal} ({node_type}): non-finite gradient")]
    NonFiniteGradient { ordinal: usize, node_type: NodeKind },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {ordinal} ({node_type}): {source}")]
    AtNode {
        ordinal: usize,
        node_type: NodeKind,
        #[source]
        source: Box<GraphError>,
    },
}

impl GraphError {
    /// Attaches node context to errors that lack it.
    pub fn at_node(self, ordinal: usize, node_type: NodeKind) -> GraphError {
        match self {
            GraphError::Tensor(_)
            | GraphError::Invalid(_)
            | GraphError::UnknownAttribute { .. } => GraphError::AtNode {
                ordinal,
                node_type,
                source: Box::new(self),
            },
            other => other,
        }
    }

    /// Innermost error, skipping node context.
    pub fn root(&self) -> &GraphError {
        match self {
            GraphError::AtNode { source, .. } => source.root(),
            other => other,
        }
    }
}

#[cfg(test)]
mod tests;
