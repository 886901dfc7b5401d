//! Forward operations that compute a value and record the matching node.

use super::node::{FlopClass, NodeKind, SavedValue, StaticAttr};
use super::tape::{NodeSpec, Tape, Var};
use super::GraphError;
use crate::tensor::{Scalar, Tensor, TensorError};

type Result<T> = std::result::Result<T, GraphError>;

/// Additive fill value for masked attention scores.
pub const MASK_FILL: f64 = -1e30;

fn real<T: Scalar>(t: &Tensor<T>) -> SavedValue<T> {
    SavedValue::Real(t.clone())
}

impl<T: Scalar> Tape<T> {
    /// `[m, k] x [k, n]`.
    pub fn mm(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.matmul(&b.value)?;
        let spec = NodeSpec::new(NodeKind::Mm, vec![a.edge, b.edge])
            .save("self", real(&a.value))
            .save("mat2", real(&b.value))
            .sizes("self_sizes", a.shape())
            .sizes("mat2_sizes", b.shape())
            .with("flop_class", StaticAttr::Class(FlopClass::Linear));
        self.record(spec, out)
    }

    /// Batched product; counted as an attention-score GEMM.
    pub fn bmm(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape()[..a.shape().len().saturating_sub(2)]
            != b.shape()[..b.shape().len().saturating_sub(2)]
        {
            return Err(TensorError::DimMismatch {
                op: "bmm",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            }
            .into());
        }
        let out = a.value.batched_matmul(&b.value)?;
        let spec = NodeSpec::new(NodeKind::Bmm, vec![a.edge, b.edge])
            .save("self", real(&a.value))
            .save("mat2", real(&b.value))
            .sizes("self_sizes", a.shape())
            .sizes("mat2_sizes", b.shape())
            .with("flop_class", StaticAttr::Class(FlopClass::AttentionScore));
        self.record(spec, out)
    }

    /// Batched product whose left operand holds attention probabilities.
    pub fn bmm_probs(&mut self, probs: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = probs.value.batched_matmul(&b.value)?;
        let spec = NodeSpec::new(NodeKind::Bmm, vec![probs.edge, b.edge])
            .save_probs("self", probs.value.clone())
            .save("mat2", real(&b.value))
            .sizes("self_sizes", probs.shape())
            .sizes("mat2_sizes", b.shape())
            .with("flop_class", StaticAttr::Class(FlopClass::AttentionScore));
        self.record(spec, out)
    }

    /// Elementwise sum; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.add(&b.value)?;
        let spec = NodeSpec::new(NodeKind::Add, vec![a.edge, b.edge])
            .sizes("self_sizes", a.shape())
            .sizes("other_sizes", b.shape())
            .count("numel", out.numel());
        self.record(spec, out)
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.mul(&b.value)?;
        let spec = NodeSpec::new(NodeKind::Mul, vec![a.edge, b.edge])
            .save("self", real(&a.value))
            .save("other", real(&b.value))
            .count("numel", out.numel());
        self.record(spec, out)
    }

    pub fn scale(&mut self, a: &Var<T>, factor: f64) -> Result<Var<T>> {
        let out = a.value.scale(T::from_f64(factor))?;
        let spec = NodeSpec::new(NodeKind::Scale, vec![a.edge])
            .count("numel", out.numel())
            .with("factor", StaticAttr::Float(factor));
        self.record(spec, out)
    }

    pub fn softmax(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.softmax_impl(a, false)
    }

    /// Softmax whose output is an attention probability matrix.
    pub fn softmax_probs(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: &Var<T>, probs: bool) -> Result<Var<T>> {
        let out = a.value.softmax_lastdim()?;
        let spec = NodeSpec::new(NodeKind::Softmax, vec![a.edge]);
        let spec = if probs {
            spec.save_probs("result", out.clone())
        } else {
            spec.save("result", real(&out))
        };
        self.record(spec, out)
    }

    pub fn transpose(&mut self, a: &Var<T>, d0: usize, d1: usize) -> Result<Var<T>> {
        let out = a.value.transpose(d0, d1)?;
        let spec = NodeSpec::new(NodeKind::Transpose, vec![a.edge])
            .sizes("self_sizes", a.shape())
            .with("dim0", StaticAttr::Int(d0))
            .with("dim1", StaticAttr::Int(d1));
        self.record(spec, out)
    }

    pub fn reshape(&mut self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = a.value.reshape(shape.to_vec())?;
        let spec = NodeSpec::new(NodeKind::Reshape, vec![a.edge]).sizes("self_sizes", a.shape());
        self.record(spec, out)
    }

    /// Selects slices at strictly increasing `index` positions of `dim`.
    pub fn index_select(&mut self, a: &Var<T>, dim: usize, index: &[usize]) -> Result<Var<T>> {
        let out = a.value.gather_axis(dim, index)?;
        let idx = Tensor::new(vec![index.len()], index.to_vec())?;
        let spec = NodeSpec::new(NodeKind::Gather, vec![a.edge])
            .save("index", SavedValue::Index(idx))
            .sizes("self_sizes", a.shape())
            .with("dim", StaticAttr::Int(dim));
        self.record(spec, out)
    }

    /// Row lookup into a `[vocab, dim]` table; output is `ids.shape + [dim]`.
    pub fn embedding(&mut self, table: &Var<T>, ids: &Tensor<usize>) -> Result<Var<T>> {
        let out = table.value.embedding(ids)?;
        let spec = NodeSpec::new(NodeKind::Embedding, vec![table.edge])
            .save("indices", SavedValue::Index(ids.clone()))
            .sizes("weight_sizes", table.shape());
        self.record(spec, out)
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: &Var<T>, weight: &Var<T>, eps: f64) -> Result<Var<T>> {
        let d = weight.value.numel();
        if x.shape().last() != Some(&d) {
            return Err(TensorError::DimMismatch {
                op: "rms_norm",
                lhs: x.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            }
            .into());
        }
        let rows = x.value.numel() / d;
        let eps = T::from_f64(eps);
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.value.numel());
        for r in x.value.data().chunks(d) {
            let ms = r.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let s = T::one() / (ms + eps).sqrt();
            rstd.push(s);
            out.extend(r.iter().zip(weight.value.data()).map(|(&v, &w)| v * s * w));
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rstd = Tensor::new(vec![rows], rstd)?;
        let spec = NodeSpec::new(NodeKind::RmsNorm, vec![x.edge, weight.edge])
            .save("self", real(&x.value))
            .save("weight", real(&weight.value))
            .save("rstd", SavedValue::Real(rstd))
            .sizes("self_sizes", x.shape())
            .with("eps", StaticAttr::Float(eps.to_f64()));
        self.record(spec, out)
    }

    /// Per-position negative log-likelihood of `target` under softmax(logits).
    /// Output shape is `logits.shape[..-1]`.
    pub fn cross_entropy(&mut self, logits: &Var<T>, target: &Tensor<usize>) -> Result<Var<T>> {
        let vocab = *logits.shape().last().unwrap_or(&1);
        let lead = &logits.shape()[..logits.shape().len() - 1];
        if lead != target.shape() {
            return Err(TensorError::DimMismatch {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: target.shape().to_vec(),
            }
            .into());
        }
        let probs = logits.value.softmax_lastdim()?;
        let mut nll = Vec::with_capacity(target.numel());
        for (row, &t) in logits.value.data().chunks(vocab).zip(target.data()) {
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: vocab,
                }
                .into());
            }
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
            nll.push(lse - row[t]);
        }
        let out = Tensor::new(lead.to_vec(), nll)?;
        let spec = NodeSpec::new(NodeKind::CrossEntropy, vec![logits.edge])
            .save("probs", SavedValue::Real(probs))
            .save("target", SavedValue::Index(target.clone()))
            .sizes("self_sizes", logits.shape());
        self.record(spec, out)
    }

    /// Adds a large negative constant above the diagonal of the trailing
    /// `[s, s]` block.
    pub fn causal_mask_fill(&mut self, scores: &Var<T>) -> Result<Var<T>> {
        let r = scores.shape().len();
        let (sq, sk) = (scores.shape()[r - 2], scores.shape()[r - 1]);
        let fill = T::from_f64(MASK_FILL);
        let mut out = scores.value.data().to_vec();
        for block in out.chunks_mut(sq * sk) {
            for i in 0..sq {
                for j in (i + 1)..sk {
                    block[i * sk + j] += fill;
                }
            }
        }
        let out = Tensor::new(scores.shape().to_vec(), out)?;
        let spec = NodeSpec::new(NodeKind::MaskFill, vec![scores.edge])
            .sizes("self_sizes", scores.shape())
            .sizes("mask_sizes", &[sq, sk])
            .with("fill", StaticAttr::Float(MASK_FILL));
        self.record(spec, out)
    }

    /// `len` slices of `dim` starting at `start`.
    pub fn slice(&mut self, a: &Var<T>, dim: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = a.value.narrow(dim, start, len)?;
        let spec = NodeSpec::new(NodeKind::Slice, vec![a.edge])
            .sizes("self_sizes", a.shape())
            .count("length", len)
            .with("dim", StaticAttr::Int(dim))
            .with("start", StaticAttr::Int(start));
        self.record(spec, out)
    }

    pub fn sum(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let out = Tensor::scalar(a.value.sum_all())?;
        let spec = NodeSpec::new(NodeKind::Sum, vec![a.edge])
            .sizes("self_sizes", a.shape())
            .count("numel", a.value.numel());
        self.record(spec, out)
    }

    pub fn mean(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let out = Tensor::scalar(a.value.mean_all())?;
        let spec = NodeSpec::new(NodeKind::Mean, vec![a.edge])
            .sizes("self_sizes", a.shape())
            .count("numel", a.value.numel());
        self.record(spec, out)
    }

    /// `Σ a·mask / divisor`, with `mask` a 0/1 tensor of `a`'s shape.
    pub fn masked_mean(&mut self, a: &Var<T>, mask: &Tensor<T>, divisor: usize) -> Result<Var<T>> {
        if divisor == 0 {
            return Err(GraphError::Invalid(
                "masked_mean over an empty selection".into(),
            ));
        }
        let total = a.value.mul(mask)?.sum_all();
        let out = Tensor::scalar(total / T::from_f64(divisor as f64))?;
        let spec = NodeSpec::new(NodeKind::MaskedMean, vec![a.edge])
            .save("mask", real(mask))
            .sizes("self_sizes", a.shape())
            .with("divisor", StaticAttr::Float(divisor as f64));
        self.record(spec, out)
    }

    /// Fused scaled dot-product attention over `[..., s, head_dim]`
    /// operands. The softmax matrix is kept as a saved activation.
    pub fn attention(
        &mut self,
        q: &Var<T>,
        k: &Var<T>,
        v: &Var<T>,
        causal: bool,
    ) -> Result<Var<T>> {
        let hd = *q.shape().last().unwrap_or(&1);
        let scale = 1.0 / (hd as f64).sqrt();
        let fill = causal.then(|| T::from_f64(MASK_FILL));
        let (probs, out) =
            Tensor::attention(&q.value, &k.value, &v.value, T::from_f64(scale), fill)?;
        let r = probs.rank();
        let (sq, sk) = (probs.shape()[r - 2], probs.shape()[r - 1]);
        let spec = NodeSpec::new(NodeKind::Attention, vec![q.edge, k.edge, v.edge])
            .save("query", real(&q.value))
            .save("key", real(&k.value))
            .save("value", real(&v.value))
            .save_probs("softmax", probs)
            .count("max_q", sq)
            .count("max_k", sk)
            .with("scale", StaticAttr::Float(scale))
            .with("causal", StaticAttr::Flag(causal))
            .with("flop_class", StaticAttr::Class(FlopClass::AttentionScore));
        self.record(spec, out)
    }

    pub fn silu(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let out = a.value.map("silu", |x| x / (T::one() + (-x).exp()))?;
        let spec = NodeSpec::new(NodeKind::Silu, vec![a.edge])
            .save("self", real(&a.value))
            .count("numel", out.numel());
        self.record(spec, out)
    }
}
