//! Full-size reference backward: dropped tokens are zeroed, never removed.

use super::apply::Reduction;
use crate::autograd::{AttrValue, Gradients, NodeGradients, SavedValue, Tape, Var};
use crate::error::{Error, Result};
use crate::filter::FilterMask;
use crate::tensor::{Scalar, Tensor};

/// Zeroes rows (queries) and columns (keys) of dropped tokens in every
/// `[bsz, ..., seq, seq]` attention matrix.
fn mask_probs<T: Scalar>(p: &Tensor<T>, red: &Reduction) -> Result<Tensor<T>> {
    let shape = p.shape();
    let r = shape.len();
    if r < 3 || shape[0] != red.bsz || shape[r - 1] != red.seq || shape[r - 2] != red.seq {
        return Err(Error::Shape(format!(
            "attention matrix {shape:?} does not match [{}, .., {}, {}]",
            red.bsz, red.seq, red.seq
        )));
    }
    let s = red.seq;
    let per_batch = p.numel() / red.bsz;
    let mut data = p.data().to_vec();
    for (b, keep) in red.seq_keep.iter().enumerate() {
        let mut kept = vec![false; s];
        for &i in keep {
            kept[i] = true;
        }
        for block in data[b * per_batch..(b + 1) * per_batch].chunks_mut(s * s) {
            for i in 0..s {
                for j in 0..s {
                    if !kept[i] || !kept[j] {
                        block[i * s + j] = T::zero();
                    }
                }
            }
        }
    }
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Applies the activation masking in place on an unrewritten tape.
pub fn mask_attention_activations<T: Scalar>(tape: &mut Tape<T>, mask: &FilterMask) -> Result<()> {
    mask_attention_with(tape, &Reduction::from_mask(mask))
}

/// As [`mask_attention_activations`] for an explicit reduction.
pub fn mask_attention_with<T: Scalar>(tape: &mut Tape<T>, red: &Reduction) -> Result<()> {
    if red.is_identity() {
        return Ok(());
    }
    let mut updates = Vec::new();
    for node in tape.nodes() {
        for sv in node.saved_vars().iter().filter(|s| s.attention_probs) {
            if let SavedValue::Real(p) = &sv.value {
                updates.push((node.ordinal(), sv.name, mask_probs(p, red)?));
            }
        }
    }
    for (ord, name, p) in updates {
        tape.mutate_attribute(ord, name, AttrValue::Saved(SavedValue::Real(p)))?;
    }
    Ok(())
}

/// Ground-truth gradients for filtered training: `loss` must be the filtered
/// loss of `mask`, so loss-gradient rows of dropped positions are zero; the
/// attention matrices are masked; then an ordinary full-size backward runs.
pub fn oracle_masked_backward<T: Scalar>(
    tape: &Tape<T>,
    loss: &Var<T>,
    mask: &FilterMask,
) -> Result<Gradients<T>> {
    let mut tape = tape.clone();
    oracle_masked_backward_observed(&mut tape, loss, mask, |_| {})
}

pub fn oracle_masked_backward_observed<T: Scalar>(
    tape: &mut Tape<T>,
    loss: &Var<T>,
    mask: &FilterMask,
    observe: impl FnMut(&NodeGradients<'_, T>),
) -> Result<Gradients<T>> {
    mask_attention_activations(tape, mask)?;
    Ok(tape.backward_observed(loss, &Tensor::scalar(T::one())?, observe)?)
}
