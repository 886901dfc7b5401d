use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Prime batch and sequence extents used for the offline trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerConfig {
    pub bsz: usize,
    pub seq: usize,
}

impl Default for MarkerConfig {
    fn default() -> Self {
        MarkerConfig { bsz: 13, seq: 1009 }
    }
}

pub fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

fn next_prime(mut n: usize) -> usize {
    while !is_prime(n) {
        n += 1;
    }
    n
}

/// Extents that appear in a model independent of batch and sequence, with a
/// label for error messages: every dimension and every pairwise product.
pub fn forbidden_extents(model: &ModelConfig) -> Vec<(usize, String)> {
    let dims = [
        (model.d_model, "d_model"),
        (model.d_ffn, "d_ffn"),
        (model.head_dim(), "head_dim"),
        (model.n_heads, "n_heads"),
        (model.vocab_size, "vocab_size"),
    ];
    let mut out: Vec<(usize, String)> = dims.iter().map(|&(v, n)| (v, n.to_string())).collect();
    for (i, &(a, na)) in dims.iter().enumerate() {
        for &(b, nb) in &dims[i..] {
            out.push((a * b, format!("{na}*{nb}")));
        }
    }
    out
}

impl MarkerConfig {
    /// Values the detector recognises as batch or sequence extents.
    pub fn marker_values(&self) -> [(usize, &'static str); 5] {
        let (b, s) = (self.bsz, self.seq);
        [
            (b, "bsz"),
            (s, "seq"),
            (s - 1, "seq-1"),
            (b * s, "bsz*seq"),
            (b * (s - 1), "bsz*(seq-1)"),
        ]
    }

    /// Checks the markers against a model's extents.
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !is_prime(self.bsz) || !is_prime(self.seq) || self.bsz == self.seq {
            return Err(Error::Config(format!(
                "markers must be distinct primes, got bsz={} seq={}",
                self.bsz, self.seq
            )));
        }
        if self.seq < 5 {
            return Err(Error::Config("sequence marker must be at least 5".into()));
        }
        let markers = self.marker_values();
        let loss = self.seq - 1;
        for (extent, name) in forbidden_extents(model) {
            for &(m, _) in &markers {
                if extent == m {
                    return Err(Error::MarkerCollision {
                        extent,
                        source_name: name,
                        marker: m,
                    });
                }
            }
            // multiples would make scalar counts ambiguous
            if extent % self.seq == 0 {
                return Err(Error::MarkerCollision {
                    extent,
                    source_name: name,
                    marker: self.seq,
                });
            }
            if extent % loss == 0 {
                return Err(Error::MarkerCollision {
                    extent,
                    source_name: name,
                    marker: loss,
                });
            }
        }
        Ok(())
    }

    /// The first valid markers at or above these ones.
    pub fn pick_for(&self, model: &ModelConfig) -> Result<MarkerConfig> {
        let mut cand = MarkerConfig {
            bsz: next_prime(self.bsz),
            seq: next_prime(self.seq),
        };
        for _ in 0..10_000 {
            match cand.validate(model) {
                Ok(()) => return Ok(cand),
                Err(Error::MarkerCollision { marker, .. }) if marker == cand.bsz => {
                    cand.bsz = next_prime(cand.bsz + 1);
                    if cand.bsz == cand.seq {
                        cand.bsz = next_prime(cand.bsz + 1);
                    }
                }
                Err(_) => {
                    cand.seq = next_prime(cand.seq + 1);
                    if cand.bsz == cand.seq {
                        cand.seq = next_prime(cand.seq + 1);
                    }
                }
            }
        }
        Err(Error::Config(
            "no collision-free marker primes found".into(),
        ))
    }
}
