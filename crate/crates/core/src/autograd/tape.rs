use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::node::{
    AttrKind, AttrValue, AttributeRecord, Edge, FlopClass, GraphNode, NodeKind, ParamId,
    SavedValue, SavedVar, StaticAttr, INPUT_METADATA,
};
use super::rules::RuleRegistry;
use super::GraphError;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Handle to a value produced during forward execution.
#[derive(Debug, Clone)]
pub struct Var<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) edge: Edge,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn edge(&self) -> Edge {
        self.edge
    }

    /// Ordinal of the producing node, if any.
    pub fn ordinal(&self) -> Option<usize> {
        match self.edge {
            Edge::Node(o) => Some(o),
            _ => None,
        }
    }
}

/// Description of a node to append; see [`Tape::record`].
pub struct NodeSpec<T> {
    pub kind: NodeKind,
    pub inputs: Vec<Edge>,
    pub saved: Vec<SavedVar<T>>,
    pub sizes: Vec<(&'static str, Vec<usize>)>,
    pub counts: Vec<(&'static str, usize)>,
    pub statics: Vec<(&'static str, StaticAttr)>,
}

impl<T> NodeSpec<T> {
    pub fn new(kind: NodeKind, inputs: Vec<Edge>) -> Self {
        NodeSpec {
            kind,
            inputs,
            saved: Vec::new(),
            sizes: Vec::new(),
            counts: Vec::new(),
            statics: Vec::new(),
        }
    }

    pub fn save(mut self, name: &'static str, value: SavedValue<T>) -> Self {
        self.saved.push(SavedVar {
            name,
            value,
            attention_probs: false,
        });
        self
    }

    pub fn save_probs(mut self, name: &'static str, value: Tensor<T>) -> Self {
        self.saved.push(SavedVar {
            name,
            value: SavedValue::Real(value),
            attention_probs: true,
        });
        self
    }

    pub fn sizes(mut self, name: &'static str, sizes: &[usize]) -> Self {
        self.sizes.push((name, sizes.to_vec()));
        self
    }

    pub fn count(mut self, name: &'static str, value: usize) -> Self {
        self.counts.push((name, value));
        self
    }

    pub fn with(mut self, name: &'static str, value: StaticAttr) -> Self {
        self.statics.push((name, value));
        self
    }
}

/// Transform applied to a gradient as it crosses one input edge of a node.
pub type EdgeTransform<T> = Arc<dyn Fn(&Tensor<T>) -> Result<Tensor<T>, TensorError> + Send + Sync>;

/// Digest of the node-type sequence and each node's attribute-kind multiset.
/// Shapes are excluded, so one architecture hashes equal at any extents.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct StructureHash(pub [u8; 32]);

impl fmt::Display for StructureHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for StructureHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StructureHash({})", &self.to_string()[..16])
    }
}

/// Multiply-add counts per bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MacCount {
    pub attention_score: u64,
    pub linear: u64,
}

impl MacCount {
    pub fn add(&mut self, class: FlopClass, macs: u64) {
        match class {
            FlopClass::Linear => self.linear += macs,
            FlopClass::AttentionScore => self.attention_score += macs,
        }
    }

    pub fn total(&self) -> u64 {
        self.attention_score + self.linear
    }
}

impl std::ops::AddAssign for MacCount {
    fn add_assign(&mut self, rhs: Self) {
        self.attention_score += rhs.attention_score;
        self.linear += rhs.linear;
    }
}

/// Gradients seen at one node during backward: the gradient of its output
/// and the gradients it sends to each input edge.
#[derive(Debug)]
pub struct NodeGradients<'a, T> {
    pub ordinal: usize,
    pub kind: NodeKind,
    pub incoming: &'a Tensor<T>,
    pub outputs: &'a [Option<Tensor<T>>],
}

/// Output of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    /// Multiply-adds executed, per node type.
    pub macs: BTreeMap<NodeKind, MacCount>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn total_macs(&self) -> MacCount {
        let mut total = MacCount::default();
        for m in self.macs.values() {
            total += *m;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

/// Recording-ordered list of graph nodes for one forward pass. A tape is
/// consumed by exactly one backward pass.
#[derive(Clone)]
pub struct Tape<T> {
    nodes: Vec<GraphNode<T>>,
    leaves: Vec<String>,
    rules: Arc<RuleRegistry<T>>,
    state: TapeState,
    edge_transforms: Vec<(usize, usize, EdgeTransform<T>)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("leaves", &self.leaves)
            .field("state", &self.state)
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_rules(Arc::new(RuleRegistry::standard()))
    }

    pub fn with_rules(rules: Arc<RuleRegistry<T>>) -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: Vec::new(),
            rules,
            state: TapeState::Recording,
            edge_transforms: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &[GraphNode<T>] {
        &self.nodes
    }

    pub fn node(&self, ordinal: usize) -> Result<&GraphNode<T>, GraphError> {
        self.nodes
            .get(ordinal)
            .ok_or(GraphError::UnknownOrdinal(ordinal))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_names(&self) -> &[String] {
        &self.leaves
    }

    pub fn is_consumed(&self) -> bool {
        self.state == TapeState::Consumed
    }

    fn ensure_recording(&self) -> Result<(), GraphError> {
        match self.state {
            TapeState::Recording => Ok(()),
            TapeState::Consumed => Err(GraphError::TapeConsumed),
        }
    }

    /// Registers a parameter leaf whose gradient is collected by backward.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var<T>, GraphError> {
        self.ensure_recording()?;
        let id = match self.leaves.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                self.leaves.push(name.to_string());
                self.leaves.len() - 1
            }
        };
        Ok(Var {
            value,
            edge: Edge::Leaf(ParamId(id)),
        })
    }

    /// Wraps a value that does not require gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value,
            edge: Edge::Constant,
        }
    }

    /// Appends a node producing `output`.
    pub fn record(&mut self, spec: NodeSpec<T>, output: Tensor<T>) -> Result<Var<T>, GraphError> {
        self.ensure_recording()?;
        if self.rules.get(spec.kind).is_none() {
            return Err(GraphError::MissingRule(spec.kind));
        }
        let ordinal = self.nodes.len();
        for edge in &spec.inputs {
            if let Edge::Node(p) = edge {
                if *p >= ordinal {
                    return Err(GraphError::Invalid(format!(
                        "node {ordinal} references non-preceding node {p}"
                    )));
                }
            }
        }
        let node = GraphNode {
            kind: spec.kind,
            ordinal,
            inputs: spec.inputs,
            saved: spec.saved,
            sizes: spec.sizes,
            counts: spec.counts,
            input_metadata: output.shape().to_vec(),
            statics: spec.statics,
        };
        node.check_saved_sizes()?;
        self.nodes.push(node);
        Ok(Var {
            value: output,
            edge: Edge::Node(ordinal),
        })
    }

    pub fn structure_hash(&self) -> StructureHash {
        let mut h = Sha256::new();
        for node in &self.nodes {
            h.update(node.kind.name().as_bytes());
            h.update([0u8]);
            let mut kinds: Vec<u8> = node.attributes().iter().map(|a| a.kind as u8).collect();
            kinds.sort_unstable();
            h.update(&kinds);
            h.update([0xffu8]);
        }
        StructureHash(h.finalize().into())
    }

    /// Every mutable attribute of every node, in ordinal then listing order.
    pub fn enumerate_attributes(&self) -> Vec<AttributeRecord> {
        self.nodes.iter().flat_map(|n| n.attributes()).collect()
    }

    /// Replaces one attribute of a recorded node.
    pub fn mutate_attribute(
        &mut self,
        ordinal: usize,
        name: &str,
        value: AttrValue<T>,
    ) -> Result<(), GraphError> {
        self.ensure_recording()?;
        let node = self
            .nodes
            .get_mut(ordinal)
            .ok_or(GraphError::UnknownOrdinal(ordinal))?;
        let unknown = || GraphError::UnknownAttribute {
            ordinal,
            name: name.to_string(),
        };
        let wrong_kind = |expected| GraphError::AttributeKind {
            ordinal,
            name: name.to_string(),
            expected,
        };
        if name == INPUT_METADATA {
            return match value {
                AttrValue::Metadata(shape) => {
                    node.input_metadata = shape;
                    Ok(())
                }
                _ => Err(wrong_kind(AttrKind::InputMetadata)),
            };
        }
        if let Some(slot) = node.saved.iter_mut().find(|s| s.name == name) {
            let AttrValue::Saved(new) = value else {
                return Err(wrong_kind(AttrKind::SavedTensor));
            };
            let same_type = matches!(
                (&slot.value, &new),
                (SavedValue::Real(_), SavedValue::Real(_))
                    | (SavedValue::Index(_), SavedValue::Index(_))
            );
            if !same_type {
                return Err(wrong_kind(AttrKind::SavedTensor));
            }
            if slot.value.shape().len() != new.shape().len() {
                return Err(GraphError::RankChange {
                    ordinal,
                    name: name.to_string(),
                    old: slot.value.shape().to_vec(),
                    new: new.shape().to_vec(),
                });
            }
            slot.value = new;
            return Ok(());
        }
        if let Some((_, slot)) = node.sizes.iter_mut().find(|(n, _)| *n == name) {
            let AttrValue::Sizes(new) = value else {
                return Err(wrong_kind(AttrKind::SizeArray));
            };
            *slot = new;
            return Ok(());
        }
        if let Some((_, slot)) = node.counts.iter_mut().find(|(n, _)| *n == name) {
            let AttrValue::Count(new) = value else {
                return Err(wrong_kind(AttrKind::ScalarCount));
            };
            *slot = new;
            return Ok(());
        }
        Err(unknown())
    }

    /// Installs a transform applied to gradients flowing from `child` into its
    /// `input`-th parent.
    pub fn set_edge_transform(
        &mut self,
        child: usize,
        input: usize,
        transform: EdgeTransform<T>,
    ) -> Result<(), GraphError> {
        self.ensure_recording()?;
        let node = self.node(child)?;
        if input >= node.inputs.len() {
            return Err(GraphError::Invalid(format!(
                "node {child} has no input {input}"
            )));
        }
        self.edge_transforms
            .retain(|(c, i, _)| !(*c == child && *i == input));
        self.edge_transforms.push((child, input, transform));
        Ok(())
    }

    /// Reverse-ordinal backward pass from `root`, consuming the tape.
    pub fn backward(
        &mut self,
        root: &Var<T>,
        seed: &Tensor<T>,
    ) -> Result<Gradients<T>, GraphError> {
        self.backward_observed(root, seed, |_| {})
    }

    /// As [`Tape::backward`], additionally handing every executed node's
    /// incoming and outgoing gradients to `observe`.
    pub fn backward_observed(
        &mut self,
        root: &Var<T>,
        seed: &Tensor<T>,
        mut observe: impl FnMut(&NodeGradients<'_, T>),
    ) -> Result<Gradients<T>, GraphError> {
        self.ensure_recording()?;
        self.state = TapeState::Consumed;
        let root_ord = match root.edge {
            Edge::Node(o) if o < self.nodes.len() => o,
            _ => {
                return Err(GraphError::Invalid(
                    "backward root is not a recorded node".into(),
                ))
            }
        };
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; root_ord + 1];
        pending[root_ord] = Some(seed.clone());
        let mut leaf_parts: Vec<Vec<(usize, Tensor<T>)>> = vec![Vec::new(); self.leaves.len()];
        let mut macs: BTreeMap<NodeKind, MacCount> = BTreeMap::new();

        for ord in (0..=root_ord).rev() {
            let Some(grad) = pending[ord].take() else {
                continue;
            };
            let node = &self.nodes[ord];
            if grad.shape() != node.input_metadata.as_slice() {
                return Err(GraphError::MetadataMismatch {
                    ordinal: ord,
                    node_type: node.kind,
                    expected: node.input_metadata.clone(),
                    actual: grad.shape().to_vec(),
                });
            }
            if grad.ensure_finite("backward").is_err() {
                return Err(GraphError::NonFiniteGradient {
                    ordinal: ord,
                    node_type: node.kind,
                });
            }
            node.check_saved_sizes()?;
            let rule = self
                .rules
                .get(node.kind)
                .ok_or(GraphError::MissingRule(node.kind))?;
            let needs: Vec<bool> = node.inputs.iter().map(|e| e.requires_grad()).collect();
            let at_node = |e: GraphError| e.at_node(ord, node.kind);
            let count = rule.macs(node, &needs).map_err(at_node)?;
            *macs.entry(node.kind).or_default() += count;
            let input_grads = rule.backward(node, &grad, &needs).map_err(at_node)?;
            if input_grads.len() != node.inputs.len() {
                return Err(GraphError::Invalid(format!(
                    "rule for {} returned {} gradients for {} inputs",
                    node.kind,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            let mut outputs = Vec::with_capacity(input_grads.len());
            for (i, g) in input_grads.into_iter().enumerate() {
                let transform = self
                    .edge_transforms
                    .iter()
                    .find(|(c, j, _)| *c == ord && *j == i);
                outputs.push(match (g, transform) {
                    (Some(g), Some((_, _, f))) => {
                        Some(f(&g).map_err(|e| GraphError::from(e).at_node(ord, node.kind))?)
                    }
                    (g, _) => g,
                });
            }
            observe(&NodeGradients {
                ordinal: ord,
                kind: node.kind,
                incoming: &grad,
                outputs: &outputs,
            });
            for (edge, g) in node.inputs.iter().zip(outputs) {
                let Some(g) = g else { continue };
                match *edge {
                    Edge::Node(p) => {
                        pending[p] = Some(match pending[p].take() {
                            None => g,
                            Some(acc) if acc.shape() == g.shape() => acc.add(&g)?,
                            Some(acc) => {
                                return Err(GraphError::MetadataMismatch {
                                    ordinal: p,
                                    node_type: self.nodes[p].kind,
                                    expected: acc.shape().to_vec(),
                                    actual: g.shape().to_vec(),
                                })
                            }
                        });
                    }
                    Edge::Leaf(ParamId(id)) => leaf_parts[id].push((ord, g)),
                    Edge::Constant => {}
                }
            }
        }

        let mut params = BTreeMap::new();
        for (id, mut parts) in leaf_parts.into_iter().enumerate() {
            // shared parameters: sum contributions in ascending ordinal order
            parts.sort_by_key(|(o, _)| *o);
            let mut iter = parts.into_iter();
            let Some((_, mut acc)) = iter.next() else {
                continue;
            };
            for (_, g) in iter {
                acc = acc.add(&g)?;
            }
            params.insert(self.leaves[id].clone(), acc);
        }
        Ok(Gradients { params, macs })
    }
}
