use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Default, Clone)]
struct Continuations {
    total: u64,
    next: HashMap<usize, u64>,
}

/// Count-based n-gram model with add-alpha smoothing. A context never seen
/// in training backs off to the next shorter context, down to unigrams.
#[derive(Debug, Clone)]
pub struct NgramModel {
    n: usize,
    alpha: f64,
    vocab_size: usize,
    /// `tables[m]` maps contexts of length `m` to their continuations.
    tables: Vec<HashMap<Vec<usize>, Continuations>>,
}

impl NgramModel {
    pub fn train(tokens: &[usize], vocab_size: usize, n: usize, alpha: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if tokens.is_empty() {
            return Err(Error::Config("n-gram training corpus is empty".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config("smoothing alpha must be non-negative".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: vocab_size,
            });
        }
        let mut tables = vec![HashMap::new(); n];
        for (i, &tok) in tokens.iter().enumerate() {
            for (m, table) in tables.iter_mut().enumerate() {
                if m > i {
                    break;
                }
                let entry: &mut Continuations = table.entry(tokens[i - m..i].to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(tok).or_default() += 1;
            }
        }
        Ok(NgramModel {
            n,
            alpha,
            vocab_size,
            tables,
        })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// `P(token | context)` using the longest seen suffix of `context` of at
    /// most `n - 1` tokens.
    pub fn prob(&self, context: &[usize], token: usize) -> f64 {
        let max = (self.n - 1).min(context.len());
        for m in (0..=max).rev() {
            let ctx = &context[context.len() - m..];
            if let Some(c) = self.tables[m].get(ctx) {
                let hits = c.next.get(&token).copied().unwrap_or(0) as f64;
                return (hits + self.alpha)
                    / (c.total as f64 + self.alpha * self.vocab_size as f64);
            }
        }
        // only reachable for an empty training table
        1.0 / self.vocab_size as f64
    }

    /// Per-position `-ln P` of every next token of each `[bsz, seq]` row,
    /// conditioning only on tokens of the same row.
    pub fn score(&self, ids: &Tensor<usize>) -> Result<Tensor<f64>> {
        if ids.rank() != 2 || ids.shape()[1] < 2 {
            return Err(Error::Shape(format!(
                "expected [bsz, seq >= 2] ids, got {:?}",
                ids.shape()
            )));
        }
        let seq = ids.shape()[1];
        let mut out = Vec::with_capacity(ids.shape()[0] * (seq - 1));
        for row in ids.data().chunks(seq) {
            for i in 1..seq {
                let p = self.prob(&row[..i], row[i]);
                if p <= 0.0 {
                    return Err(Error::NonFinite {
                        what: format!(
                            "n-gram log-probability of token {} (zero probability)",
                            row[i]
                        ),
                    });
                }
                out.push(-p.ln());
            }
        }
        Ok(Tensor::new(vec![ids.shape()[0], seq - 1], out)?)
    }
}
