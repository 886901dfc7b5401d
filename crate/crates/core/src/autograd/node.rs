//! Recorded graph nodes and their reflectable attributes.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::GraphError;
use crate::tensor::{Scalar, Tensor};

/// Operation recorded on the tape. The discriminant doubles as the stable
/// numeric id written to plan files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u16)]
pub enum NodeKind {
    Mm = 0,
    Bmm = 1,
    Add = 2,
    Mul = 3,
    Scale = 4,
    Softmax = 5,
    Transpose = 6,
    Reshape = 7,
    Gather = 8,
    Embedding = 9,
    RmsNorm = 10,
    CrossEntropy = 11,
    MaskFill = 12,
    Slice = 13,
    Sum = 14,
    Mean = 15,
    MaskedMean = 16,
    Attention = 17,
    Silu = 18,
}

impl NodeKind {
    pub const ALL: [NodeKind; 19] = [
        NodeKind::Mm,
        NodeKind::Bmm,
        NodeKind::Add,
        NodeKind::Mul,
        NodeKind::Scale,
        NodeKind::Softmax,
        NodeKind::Transpose,
        NodeKind::Reshape,
        NodeKind::Gather,
        NodeKind::Embedding,
        NodeKind::RmsNorm,
        NodeKind::CrossEntropy,
        NodeKind::MaskFill,
        NodeKind::Slice,
        NodeKind::Sum,
        NodeKind::Mean,
        NodeKind::MaskedMean,
        NodeKind::Attention,
        NodeKind::Silu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Mm => "mm",
            NodeKind::Bmm => "bmm",
            NodeKind::Add => "add",
            NodeKind::Mul => "mul",
            NodeKind::Scale => "scale",
            NodeKind::Softmax => "softmax",
            NodeKind::Transpose => "transpose",
            NodeKind::Reshape => "reshape",
            NodeKind::Gather => "gather",
            NodeKind::Embedding => "embedding",
            NodeKind::RmsNorm => "rms_norm",
            NodeKind::CrossEntropy => "cross_entropy",
            NodeKind::MaskFill => "mask_fill",
            NodeKind::Slice => "slice",
            NodeKind::Sum => "sum",
            NodeKind::Mean => "mean",
            NodeKind::MaskedMean => "masked_mean",
            NodeKind::Attention => "attention",
            NodeKind::Silu => "silu",
        }
    }

    pub fn id(self) -> u16 {
        self as u16
    }

    pub fn from_id(id: u16) -> Option<NodeKind> {
        NodeKind::ALL.get(id as usize).copied()
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Index of a registered parameter leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Where a node input came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Node(usize),
    Leaf(ParamId),
    Constant,
}

impl Edge {
    pub fn requires_grad(self) -> bool {
        !matches!(self, Edge::Constant)
    }
}

/// Saved activation: real-valued or integer indices.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedValue<T> {
    Real(Tensor<T>),
    Index(Tensor<usize>),
}

impl<T: Scalar> SavedValue<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            SavedValue::Real(t) => t.shape(),
            SavedValue::Index(t) => t.shape(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SavedVar<T> {
    pub name: &'static str,
    pub value: SavedValue<T>,
    /// Marks attention probability matrices (the softmax activation).
    pub attention_probs: bool,
}

/// FLOP bucket a GEMM-type node contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopClass {
    Linear,
    AttentionScore,
}

/// Non-extent configuration of a node (axes, scale factors, flags). Never
/// touched by graph rewriting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StaticAttr {
    Float(f64),
    Int(usize),
    Flag(bool),
    Class(FlopClass),
}

/// Kind of a mutable node attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum AttrKind {
    SavedTensor = 0,
    SizeArray = 1,
    ScalarCount = 2,
    InputMetadata = 3,
}

impl AttrKind {
    pub fn name(self) -> &'static str {
        match self {
            AttrKind::SavedTensor => "saved_tensor",
            AttrKind::SizeArray => "size_array",
            AttrKind::ScalarCount => "scalar_count",
            AttrKind::InputMetadata => "input_metadata",
        }
    }

    pub fn from_id(id: u8) -> Option<AttrKind> {
        match id {
            0 => Some(AttrKind::SavedTensor),
            1 => Some(AttrKind::SizeArray),
            2 => Some(AttrKind::ScalarCount),
            3 => Some(AttrKind::InputMetadata),
            _ => None,
        }
    }
}

impl fmt::Display for AttrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const INPUT_METADATA: &str = "input_metadata";

/// Replacement value for [`super::Tape::mutate_attribute`].
#[derive(Debug, Clone)]
pub enum AttrValue<T> {
    Saved(SavedValue<T>),
    Sizes(Vec<usize>),
    Count(usize),
    Metadata(Vec<usize>),
}

impl<T> AttrValue<T> {
    pub fn kind(&self) -> AttrKind {
        match self {
            AttrValue::Saved(_) => AttrKind::SavedTensor,
            AttrValue::Sizes(_) => AttrKind::SizeArray,
            AttrValue::Count(_) => AttrKind::ScalarCount,
            AttrValue::Metadata(_) => AttrKind::InputMetadata,
        }
    }
}

/// One entry of the attribute stream produced by
/// [`super::Tape::enumerate_attributes`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRecord {
    pub ordinal: usize,
    pub node_type: NodeKind,
    /// Position of the attribute within its node's listing.
    pub index: u16,
    pub name: &'static str,
    pub kind: AttrKind,
    /// Tensor shape, size array, metadata shape, or `[count]`.
    pub value: Vec<usize>,
    pub attention_probs: bool,
}

/// One recorded backward step.
#[derive(Debug, Clone)]
pub struct GraphNode<T> {
    pub(crate) kind: NodeKind,
    pub(crate) ordinal: usize,
    pub(crate) inputs: Vec<Edge>,
    pub(crate) saved: Vec<SavedVar<T>>,
    pub(crate) sizes: Vec<(&'static str, Vec<usize>)>,
    pub(crate) counts: Vec<(&'static str, usize)>,
    pub(crate) input_metadata: Vec<usize>,
    pub(crate) statics: Vec<(&'static str, StaticAttr)>,
}

impl<T: Scalar> GraphNode<T> {
    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn ordinal(&self) -> usize {
        self.ordinal
    }

    pub fn inputs(&self) -> &[Edge] {
        &self.inputs
    }

    pub fn input_metadata(&self) -> &[usize] {
        &self.input_metadata
    }

    pub fn saved_vars(&self) -> &[SavedVar<T>] {
        &self.saved
    }

    fn missing(&self, name: &str) -> GraphError {
        GraphError::UnknownAttribute {
            ordinal: self.ordinal,
            name: name.to_string(),
        }
    }

    pub fn saved(&self, name: &str) -> Result<&SavedValue<T>, GraphError> {
        self.saved
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.value)
            .ok_or_else(|| self.missing(name))
    }

    pub fn saved_real(&self, name: &str) -> Result<&Tensor<T>, GraphError> {
        match self.saved(name)? {
            SavedValue::Real(t) => Ok(t),
            SavedValue::Index(_) => Err(GraphError::AttributeKind {
                ordinal: self.ordinal,
                name: name.to_string(),
                expected: AttrKind::SavedTensor,
            }),
        }
    }

    pub fn saved_index(&self, name: &str) -> Result<&Tensor<usize>, GraphError> {
        match self.saved(name)? {
            SavedValue::Index(t) => Ok(t),
            SavedValue::Real(_) => Err(GraphError::AttributeKind {
                ordinal: self.ordinal,
                name: name.to_string(),
                expected: AttrKind::SavedTensor,
            }),
        }
    }

    pub fn size(&self, name: &str) -> Result<&[usize], GraphError> {
        self.sizes
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| self.missing(name))
    }

    pub fn count(&self, name: &str) -> Result<usize, GraphError> {
        self.counts
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| self.missing(name))
    }

    fn static_attr(&self, name: &str) -> Result<StaticAttr, GraphError> {
        self.statics
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| self.missing(name))
    }

    pub fn static_float(&self, name: &str) -> Result<f64, GraphError> {
        match self.static_attr(name)? {
            StaticAttr::Float(v) => Ok(v),
            _ => Err(self.missing(name)),
        }
    }

    pub fn static_int(&self, name: &str) -> Result<usize, GraphError> {
        match self.static_attr(name)? {
            StaticAttr::Int(v) => Ok(v),
            _ => Err(self.missing(name)),
        }
    }

    pub fn static_flag(&self, name: &str) -> Result<bool, GraphError> {
        match self.static_attr(name)? {
            StaticAttr::Flag(v) => Ok(v),
            _ => Err(self.missing(name)),
        }
    }

    pub fn flop_class(&self) -> FlopClass {
        match self.static_attr("flop_class") {
            Ok(StaticAttr::Class(c)) => c,
            _ => FlopClass::Linear,
        }
    }

    /// Mutable attributes in listing order: saved tensors, size arrays,
    /// counts, then input metadata.
    pub fn attributes(&self) -> Vec<AttributeRecord> {
        let mut out =
            Vec::with_capacity(self.saved.len() + self.sizes.len() + self.counts.len() + 1);
        let mut push = |name, kind, value, probs| {
            let index = out.len() as u16;
            out.push(AttributeRecord {
                ordinal: self.ordinal,
                node_type: self.kind,
                index,
                name,
                kind,
                value,
                attention_probs: probs,
            });
        };
        for s in &self.saved {
            push(
                s.name,
                AttrKind::SavedTensor,
                s.value.shape().to_vec(),
                s.attention_probs,
            );
        }
        for (n, v) in &self.sizes {
            push(*n, AttrKind::SizeArray, v.clone(), false);
        }
        for (n, v) in &self.counts {
            push(*n, AttrKind::ScalarCount, vec![*v], false);
        }
        push(
            INPUT_METADATA,
            AttrKind::InputMetadata,
            self.input_metadata.clone(),
            false,
        );
        out
    }

    /// Checks every saved variable against its `<name>_sizes` array, when one
    /// exists.
    pub(crate) fn check_saved_sizes(&self) -> Result<(), GraphError> {
        for s in &self.saved {
            let key = format!("{}_sizes", s.name);
            if let Some((_, sizes)) = self.sizes.iter().find(|(n, _)| *n == key) {
                if s.value.shape() != sizes.as_slice() {
                    return Err(GraphError::SavedSizeMismatch {
                        ordinal: self.ordinal,
                        node_type: self.kind,
                        attribute: s.name,
                        expected: sizes.clone(),
                        actual: s.value.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}
