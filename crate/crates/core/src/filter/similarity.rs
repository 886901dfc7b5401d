use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::FilterMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Similarity {
    /// `|kept_a ∩ kept_b| / |kept_a|`.
    pub common_ratio: f64,
    /// Correlation of the two score vectors; `None` when either has zero
    /// variance.
    pub pearson: Option<f64>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Overlap of two masks plus the correlation of the scores behind them.
pub fn mask_similarity(
    a: &FilterMask,
    b: &FilterMask,
    scores_a: &[f64],
    scores_b: &[f64],
) -> Result<Similarity> {
    if a.bsz() != b.bsz() || a.loss_len() != b.loss_len() {
        return Err(Error::Shape(format!(
            "masks differ in shape: [{}, {}] vs [{}, {}]",
            a.bsz(),
            a.loss_len(),
            b.bsz(),
            b.loss_len()
        )));
    }
    let (ka, kb) = (a.keep(), b.keep());
    if scores_a.len() != ka.len() || scores_b.len() != ka.len() {
        return Err(Error::Shape(
            "score vectors must cover every mask position".into(),
        ));
    }
    let common = ka.iter().zip(&kb).filter(|(x, y)| **x && **y).count();
    Ok(Similarity {
        common_ratio: common as f64 / a.total_kept() as f64,
        pearson: pearson(scores_a, scores_b),
    })
}

/// Monte-Carlo mean common ratio of two independent uniformly random masks.
pub fn chance_common_ratio(
    bsz: usize,
    loss_len: usize,
    k_percent: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let count = super::kept_count(loss_len, k_percent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Result<FilterMask> {
        let kept = (0..bsz)
            .map(|_| {
                let mut v = sample(rng, loss_len, count).into_vec();
                v.sort_unstable();
                v
            })
            .collect();
        FilterMask::from_kept(loss_len, kept, k_percent)
    };
    let zeros = vec![0.0; bsz * loss_len];
    let mut total = 0.0;
    for _ in 0..trials.max(1) {
        let a = draw(&mut rng)?;
        let b = draw(&mut rng)?;
        total += mask_similarity(&a, &b, &zeros, &zeros)?.common_ratio;
    }
    Ok(total / trials.max(1) as f64)
}
