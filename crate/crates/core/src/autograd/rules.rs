//! Gradient rules, one per node type, looked up by name at backward time.
//!
//! Every rule reads extents from the node's current attributes rather than
//! from anything captured at forward time, so a node whose attributes were
//! shrunk consistently runs at the reduced extents.

use std::collections::HashMap;

use super::node::{GraphNode, NodeKind};
use super::tape::MacCount;
use super::GraphError;
use crate::tensor::{numel, Scalar, Tensor};

type Grads<T> = Vec<Option<Tensor<T>>>;

/// Backward computation for one node type.
pub trait BackwardRule<T: Scalar>: Send + Sync {
    fn kind(&self) -> NodeKind;

    /// Gradients for each input edge, given the gradient of the node output.
    /// Inputs whose `needs` flag is false may return `None`.
    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Grads<T>, GraphError>;

    /// GEMM multiply-adds this node's backward executes.
    fn macs(&self, _node: &GraphNode<T>, _needs: &[bool]) -> Result<MacCount, GraphError> {
        Ok(MacCount::default())
    }
}

/// Name-keyed table of backward rules.
pub struct RuleRegistry<T> {
    rules: HashMap<&'static str, Box<dyn BackwardRule<T>>>,
}

impl<T: Scalar> Default for RuleRegistry<T> {
    fn default() -> Self {
        Self::standard()
    }
}

impl<T: Scalar> RuleRegistry<T> {
    pub fn empty() -> Self {
        RuleRegistry {
            rules: HashMap::new(),
        }
    }

    /// Registry holding a rule for every [`NodeKind`].
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(MmRule));
        r.register(Box::new(BmmRule));
        r.register(Box::new(AddRule));
        r.register(Box::new(MulRule));
        r.register(Box::new(ScaleRule));
        r.register(Box::new(SoftmaxRule));
        r.register(Box::new(TransposeRule));
        r.register(Box::new(ReshapeRule));
        r.register(Box::new(GatherRule));
        r.register(Box::new(EmbeddingRule));
        r.register(Box::new(RmsNormRule));
        r.register(Box::new(CrossEntropyRule));
        r.register(Box::new(MaskFillRule));
        r.register(Box::new(SliceRule));
        r.register(Box::new(SumRule));
        r.register(Box::new(MeanRule));
        r.register(Box::new(MaskedMeanRule));
        r.register(Box::new(AttentionRule));
        r.register(Box::new(SiluRule));
        r
    }

    /// Adds or replaces the rule for its node type.
    pub fn register(&mut self, rule: Box<dyn BackwardRule<T>>) {
        self.rules.insert(rule.kind().name(), rule);
    }

    pub fn get(&self, kind: NodeKind) -> Option<&dyn BackwardRule<T>> {
        self.rules.get(kind.name()).map(|r| r.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&dyn BackwardRule<T>> {
        self.rules.get(name).map(|r| r.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v: Vec<_> = self.rules.keys().copied().collect();
        v.sort_unstable();
        v
    }
}

fn expect_shape<T: Scalar>(
    node: &GraphNode<T>,
    what: &'static str,
    expected: &[usize],
    actual: &[usize],
) -> Result<(), GraphError> {
    if expected != actual {
        return Err(GraphError::SavedSizeMismatch {
            ordinal: node.ordinal(),
            node_type: node.kind(),
            attribute: what,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

fn expect_numel<T: Scalar>(node: &GraphNode<T>, grad: &Tensor<T>) -> Result<(), GraphError> {
    let n = node.count("numel")?;
    if n != grad.numel() {
        return Err(GraphError::SavedSizeMismatch {
            ordinal: node.ordinal(),
            node_type: node.kind(),
            attribute: "numel",
            expected: vec![n],
            actual: vec![grad.numel()],
        });
    }
    Ok(())
}

/// `P ⊙ (G − rowsum(G ⊙ P))` over the last axis.
pub(crate) fn softmax_backward<T: Scalar>(
    probs: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<Tensor<T>, GraphError> {
    if probs.shape() != grad.shape() {
        return Err(crate::tensor::TensorError::DimMismatch {
            op: "softmax_backward",
            lhs: probs.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        }
        .into());
    }
    let width = *probs.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(probs.numel());
    for (p, g) in probs.data().chunks(width).zip(grad.data().chunks(width)) {
        let mut dot = T::zero();
        for (&pi, &gi) in p.iter().zip(g) {
            dot += pi * gi;
        }
        out.extend(p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - dot)));
    }
    Ok(Tensor::new(probs.shape().to_vec(), out)?)
}

struct MmRule;

impl<T: Scalar> BackwardRule<T> for MmRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Mm
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let lhs = node.saved_real("self")?;
        let rhs = node.saved_real("mat2")?;
        let g_lhs = if needs[0] {
            Some(grad.matmul_nt(rhs)?)
        } else {
            None
        };
        let g_rhs = if needs[1] {
            Some(lhs.matmul_tn(grad)?)
        } else {
            None
        };
        Ok(vec![g_lhs, g_rhs])
    }

    fn macs(&self, node: &GraphNode<T>, needs: &[bool]) -> Result<MacCount, GraphError> {
        let a = node.size("self_sizes")?;
        let b = node.size("mat2_sizes")?;
        let per = (a[0] * a[1] * b[1]) as u64;
        let mut m = MacCount::default();
        let products = needs.iter().filter(|&&n| n).count() as u64;
        m.add(node.flop_class(), per * products);
        Ok(m)
    }
}

struct BmmRule;

impl<T: Scalar> BackwardRule<T> for BmmRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Bmm
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let lhs = node.saved_real("self")?;
        let rhs = node.saved_real("mat2")?;
        let g_lhs = if needs[0] {
            Some(grad.batched_matmul_ex(false, rhs, true)?)
        } else {
            None
        };
        let g_rhs = if needs[1] {
            Some(lhs.batched_matmul_ex(true, grad, false)?)
        } else {
            None
        };
        Ok(vec![g_lhs, g_rhs])
    }

    fn macs(&self, node: &GraphNode<T>, needs: &[bool]) -> Result<MacCount, GraphError> {
        let a = node.size("self_sizes")?;
        let b = node.size("mat2_sizes")?;
        let r = a.len();
        let per = (numel(&a[..r - 2]) * a[r - 2] * a[r - 1] * b[b.len() - 1]) as u64;
        let mut m = MacCount::default();
        m.add(
            node.flop_class(),
            per * needs.iter().filter(|&&n| n).count() as u64,
        );
        Ok(m)
    }
}

struct AddRule;

impl<T: Scalar> BackwardRule<T> for AddRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Add
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        expect_numel(node, grad)?;
        let lhs_sizes = node.size("self_sizes")?;
        let rhs_sizes = node.size("other_sizes")?;
        expect_shape(node, "self_sizes", lhs_sizes, grad.shape())?;
        let g_rhs = if !needs[1] {
            None
        } else if rhs_sizes == grad.shape() {
            Some(grad.clone())
        } else {
            Some(grad.sum_to_suffix(rhs_sizes)?)
        };
        Ok(vec![needs[0].then(|| grad.clone()), g_rhs])
    }
}

struct MulRule;

impl<T: Scalar> BackwardRule<T> for MulRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Mul
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        expect_numel(node, grad)?;
        let lhs = node.saved_real("self")?;
        let rhs = node.saved_real("other")?;
        let g_lhs = if needs[0] { Some(grad.mul(rhs)?) } else { None };
        let g_rhs = if needs[1] { Some(grad.mul(lhs)?) } else { None };
        Ok(vec![g_lhs, g_rhs])
    }
}

struct ScaleRule;

impl<T: Scalar> BackwardRule<T> for ScaleRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Scale
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        expect_numel(node, grad)?;
        let factor = T::from_f64(node.static_float("factor")?);
        Ok(vec![Some(grad.scale(factor)?)])
    }
}

struct SoftmaxRule;

impl<T: Scalar> BackwardRule<T> for SoftmaxRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Softmax
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let probs = node.saved_real("result")?;
        Ok(vec![Some(softmax_backward(probs, grad)?)])
    }
}

struct TransposeRule;

impl<T: Scalar> BackwardRule<T> for TransposeRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Transpose
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let d0 = node.static_int("dim0")?;
        let d1 = node.static_int("dim1")?;
        let out = grad.transpose(d0, d1)?;
        expect_shape(node, "self_sizes", node.size("self_sizes")?, out.shape())?;
        Ok(vec![Some(out)])
    }
}

struct ReshapeRule;

impl<T: Scalar> BackwardRule<T> for ReshapeRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Reshape
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let target = node.size("self_sizes")?.to_vec();
        Ok(vec![Some(grad.reshape(target)?)])
    }
}

struct GatherRule;

impl<T: Scalar> BackwardRule<T> for GatherRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Gather
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let dim = node.static_int("dim")?;
        let index = node.saved_index("index")?;
        let sizes = node.size("self_sizes")?;
        Ok(vec![Some(grad.scatter_axis(
            dim,
            index.data(),
            sizes[dim],
            T::zero(),
        )?)])
    }
}

struct EmbeddingRule;

impl<T: Scalar> BackwardRule<T> for EmbeddingRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Embedding
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let ids = node.saved_index("indices")?;
        let table = node.size("weight_sizes")?;
        Ok(vec![Some(Tensor::index_add_rows(ids, grad, table[0])?)])
    }
}

struct RmsNormRule;

impl<T: Scalar> BackwardRule<T> for RmsNormRule {
    fn kind(&self) -> NodeKind {
        NodeKind::RmsNorm
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let x = node.saved_real("self")?;
        let w = node.saved_real("weight")?;
        let rstd = node.saved_real("rstd")?;
        expect_shape(node, "self", x.shape(), grad.shape())?;
        let d = w.numel();
        let rows = x.numel() / d;
        expect_shape(node, "rstd", &[rows], &[rstd.numel()])?;
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut dx = Vec::with_capacity(x.numel());
        let mut dw = vec![T::zero(); d];
        for r in 0..rows {
            let xs = &x.data()[r * d..(r + 1) * d];
            let gs = &grad.data()[r * d..(r + 1) * d];
            let s = rstd.data()[r];
            let mut dot = T::zero();
            for j in 0..d {
                let xhat = xs[j] * s;
                dot += gs[j] * w.data()[j] * xhat;
                dw[j] += gs[j] * xhat;
            }
            let mean = dot * inv_d;
            for j in 0..d {
                let xhat = xs[j] * s;
                dx.push(s * (gs[j] * w.data()[j] - xhat * mean));
            }
        }
        let dx = needs[0]
            .then(|| Tensor::new(x.shape().to_vec(), dx))
            .transpose()?;
        let dw = needs[1].then(|| Tensor::new(vec![d], dw)).transpose()?;
        Ok(vec![dx, dw])
    }
}

struct CrossEntropyRule;

impl<T: Scalar> BackwardRule<T> for CrossEntropyRule {
    fn kind(&self) -> NodeKind {
        NodeKind::CrossEntropy
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let probs = node.saved_real("probs")?;
        let target = node.saved_index("target")?;
        let vocab = *probs.shape().last().unwrap_or(&1);
        expect_shape(node, "target", target.shape(), grad.shape())?;
        let mut out = probs.data().to_vec();
        for (r, (&t, &g)) in target.data().iter().zip(grad.data()).enumerate() {
            let row = &mut out[r * vocab..(r + 1) * vocab];
            row[t] -= T::one();
            for v in row.iter_mut() {
                *v *= g;
            }
        }
        Ok(vec![Some(Tensor::new(probs.shape().to_vec(), out)?)])
    }
}

struct MaskFillRule;

impl<T: Scalar> BackwardRule<T> for MaskFillRule {
    fn kind(&self) -> NodeKind {
        NodeKind::MaskFill
    }

    // The mask is additive, so the gradient passes through unchanged.
    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        expect_shape(node, "self_sizes", node.size("self_sizes")?, grad.shape())?;
        let mask = node.size("mask_sizes")?;
        let r = grad.rank();
        expect_shape(node, "mask_sizes", mask, &grad.shape()[r - 2..])?;
        Ok(vec![Some(grad.clone())])
    }
}

struct SliceRule;

impl<T: Scalar> BackwardRule<T> for SliceRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Slice
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let dim = node.static_int("dim")?;
        let start = node.static_int("start")?;
        let len = node.count("length")?;
        let sizes = node.size("self_sizes")?;
        expect_shape(node, "length", &[len], &[grad.shape()[dim]])?;
        if sizes[dim] == len && start == 0 {
            return Ok(vec![Some(grad.clone())]);
        }
        let keep: Vec<usize> = (start..start + len).collect();
        Ok(vec![Some(grad.scatter_axis(
            dim,
            &keep,
            sizes[dim],
            T::zero(),
        )?)])
    }
}

struct SumRule;

impl<T: Scalar> BackwardRule<T> for SumRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Sum
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let sizes = node.size("self_sizes")?;
        expect_shape(node, "numel", &[node.count("numel")?], &[numel(sizes)])?;
        Ok(vec![Some(Tensor::filled(sizes.to_vec(), grad.item())?)])
    }
}

struct MeanRule;

impl<T: Scalar> BackwardRule<T> for MeanRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Mean
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let sizes = node.size("self_sizes")?;
        let n = node.count("numel")?;
        expect_shape(node, "numel", &[n], &[numel(sizes)])?;
        let v = grad.item() / T::from_f64(n as f64);
        Ok(vec![Some(Tensor::filled(sizes.to_vec(), v)?)])
    }
}

struct MaskedMeanRule;

impl<T: Scalar> BackwardRule<T> for MaskedMeanRule {
    fn kind(&self) -> NodeKind {
        NodeKind::MaskedMean
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let mask = node.saved_real("mask")?;
        expect_shape(node, "self_sizes", node.size("self_sizes")?, mask.shape())?;
        let divisor = T::from_f64(node.static_float("divisor")?);
        let g = grad.item() / divisor;
        Ok(vec![Some(mask.scale(g)?)])
    }
}

struct AttentionRule;

impl<T: Scalar> BackwardRule<T> for AttentionRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Attention
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        let q = node.saved_real("query")?;
        let k = node.saved_real("key")?;
        let v = node.saved_real("value")?;
        let p = node.saved_real("softmax")?;
        let r = p.rank();
        expect_shape(node, "max_q", &[node.count("max_q")?], &[p.shape()[r - 2]])?;
        expect_shape(node, "max_k", &[node.count("max_k")?], &[p.shape()[r - 1]])?;
        let scale = T::from_f64(node.static_float("scale")?);
        // G_V = Pᵀ G_O ; G_P = G_O Vᵀ ; G_A = softmax'(P, G_P)
        let (g_q, g_k, g_v) = Tensor::attention_backward(q, k, v, p, grad, scale)?;
        Ok(vec![Some(g_q), Some(g_k), Some(g_v)])
    }

    fn macs(&self, node: &GraphNode<T>, _needs: &[bool]) -> Result<MacCount, GraphError> {
        let p = node.saved_real("softmax")?.shape();
        let hd = *node.saved_real("value")?.shape().last().unwrap_or(&1);
        let per = (numel(p) * hd) as u64;
        let mut m = MacCount::default();
        m.add(node.flop_class(), 4 * per);
        Ok(m)
    }
}

struct SiluRule;

impl<T: Scalar> BackwardRule<T> for SiluRule {
    fn kind(&self) -> NodeKind {
        NodeKind::Silu
    }

    fn backward(
        &self,
        node: &GraphNode<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Grads<T>, GraphError> {
        expect_numel(node, grad)?;
        let x = node.saved_real("self")?;
        let out = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&xi, &gi)| {
                let s = T::one() / (T::one() + (-xi).exp());
                gi * s * (T::one() + xi * (T::one() - s))
            })
            .collect();
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), out)?)])
    }
}
