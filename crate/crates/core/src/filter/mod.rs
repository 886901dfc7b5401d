//! Token selection by excess loss and the filtered training loss.

mod ngram;
mod scored;
mod similarity;

pub use ngram::NgramModel;
pub use scored::{
    read_scored, score_corpus, write_scored, ScoredCorpus, ScoredSequence, SCORED_VERSION,
};
pub use similarity::{chance_common_ratio, mask_similarity, pearson, Similarity};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Keep/drop decision per loss position, `[bsz, loss_len]`, with a uniform
/// kept count per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMask {
    bsz: usize,
    loss_len: usize,
    k_percent: f64,
    kept: Vec<Vec<usize>>,
}

/// Positions kept out of `n` at `k_percent`: `ceil(n * k / 100)`.
pub fn kept_count(n: usize, k_percent: f64) -> Result<usize> {
    check_k(k_percent)?;
    let exact = n as f64 * k_percent / 100.0;
    // absorb representation error so that e.g. 200 * 10% is exactly 20
    let c = (exact - 1e-9).ceil().max(0.0) as usize;
    Ok(c.clamp(1.min(n), n))
}

fn check_k(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Filter(format!(
            "k_percent must lie in (0, 100], got {k_percent}"
        )));
    }
    Ok(())
}

impl FilterMask {
    /// Builds a mask from per-sequence kept positions.
    pub fn from_kept(loss_len: usize, kept: Vec<Vec<usize>>, k_percent: f64) -> Result<Self> {
        check_k(k_percent)?;
        let count = kept.first().map_or(0, Vec::len);
        if kept.is_empty() || count == 0 {
            return Err(Error::Filter("mask keeps no positions".into()));
        }
        for (b, row) in kept.iter().enumerate() {
            if row.len() != count {
                return Err(Error::Filter(format!(
                    "ragged kept counts: sequence 0 keeps {count}, sequence {b} keeps {}",
                    row.len()
                )));
            }
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Filter(format!(
                        "kept positions of sequence {b} are not strictly increasing"
                    )));
                }
            }
            if let Some(&last) = row.last() {
                if last >= loss_len {
                    return Err(Error::Filter(format!(
                        "kept position {last} out of range for {loss_len} loss positions"
                    )));
                }
            }
        }
        Ok(FilterMask {
            bsz: kept.len(),
            loss_len,
            k_percent,
            kept,
        })
    }

    pub fn keep_all(bsz: usize, loss_len: usize) -> Result<Self> {
        Self::from_kept(loss_len, vec![(0..loss_len).collect(); bsz], 100.0)
    }

    pub fn bsz(&self) -> usize {
        self.bsz
    }

    /// Number of loss positions per sequence (`seq - 1`).
    pub fn loss_len(&self) -> usize {
        self.loss_len
    }

    /// Token positions per sequence (`loss_len + 1`).
    pub fn seq_len(&self) -> usize {
        self.loss_len + 1
    }

    pub fn k_percent(&self) -> f64 {
        self.k_percent
    }

    pub fn kept(&self) -> &[Vec<usize>] {
        &self.kept
    }

    /// Kept positions per sequence.
    pub fn kept_per_seq(&self) -> usize {
        self.kept[0].len()
    }

    pub fn total_kept(&self) -> usize {
        self.bsz * self.kept_per_seq()
    }

    pub fn keeps_all(&self) -> bool {
        self.kept_per_seq() == self.loss_len
    }

    pub fn is_kept(&self, b: usize, i: usize) -> bool {
        self.kept[b].binary_search(&i).is_ok()
    }

    /// Row-major `[bsz, loss_len]` booleans.
    pub fn keep(&self) -> Vec<bool> {
        let mut out = vec![false; self.bsz * self.loss_len];
        for (b, row) in self.kept.iter().enumerate() {
            for &i in row {
                out[b * self.loss_len + i] = true;
            }
        }
        out
    }

    /// 0/1 tensor `[bsz, loss_len]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .keep()
            .into_iter()
            .map(|k| if k { T::one() } else { T::zero() })
            .collect();
        Tensor::new(vec![self.bsz, self.loss_len], data).expect("mask extents are positive")
    }
}

/// `target - reference`, elementwise.
pub fn excess_loss<T: Scalar>(target: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
    if target.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "excess loss: target {:?} vs reference {:?}",
            target.shape(),
            reference.shape()
        )));
    }
    Ok(target.sub(reference)?)
}

/// Keeps the `ceil(n * k%)` largest scores of every row of a `[bsz, n]`
/// tensor; equal scores keep the lower index first.
pub fn select_topk<T: Scalar>(scores: &Tensor<T>, k_percent: f64) -> Result<FilterMask> {
    if scores.rank() != 2 {
        return Err(Error::Shape(format!(
            "scores must be [bsz, n], got {:?}",
            scores.shape()
        )));
    }
    let n = scores.shape()[1];
    let count = kept_count(n, k_percent)?;
    let kept = scores
        .data()
        .chunks(n)
        .map(|row| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .expect("finite scores")
                    .then(a.cmp(&b))
            });
            let mut top = order[..count].to_vec();
            top.sort_unstable();
            top
        })
        .collect();
    FilterMask::from_kept(n, kept, k_percent)
}

/// Mean of `nll` over kept positions, recorded on the tape.
pub fn filtered_loss<T: Scalar>(
    tape: &mut Tape<T>,
    nll: &Var<T>,
    mask: &FilterMask,
) -> Result<Var<T>> {
    if nll.shape() != [mask.bsz(), mask.loss_len()] {
        return Err(Error::Shape(format!(
            "nll {:?} does not match mask [{}, {}]",
            nll.shape(),
            mask.bsz(),
            mask.loss_len()
        )));
    }
    Ok(tape.masked_mean(nll, &mask.to_tensor(), mask.total_kept())?)
}

#[cfg(test)]
mod tests;
