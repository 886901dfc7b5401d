use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A packed token stream. Documents are concatenated without separators or
/// cross-document masking and cut into fixed-length windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    pub ids: Vec<usize>,
    pub vocab_size: usize,
}

impl TokenCorpus {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Config("corpus is empty".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: vocab_size,
            });
        }
        Ok(TokenCorpus { ids, vocab_size })
    }

    /// Reads newline-delimited integer id sequences; any file that does not
    /// parse that way is tokenized byte by byte (vocabulary 256).
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if let Some(ids) = parse_id_lines(&bytes) {
            let vocab = ids.iter().max().map_or(1, |m| m + 1);
            return Self::new(ids, vocab).map_err(|e| Error::format(path, e.to_string()));
        }
        Self::new(bytes.into_iter().map(usize::from).collect(), 256)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-overlapping windows of `seq` tokens.
    pub fn num_windows(&self, seq: usize) -> usize {
        self.ids.len() / seq.max(1)
    }

    pub fn window(&self, index: usize, seq: usize) -> &[usize] {
        &self.ids[index * seq..(index + 1) * seq]
    }

    /// `[bsz, seq]` batch made of the given windows.
    pub fn batch(&self, windows: &[usize], seq: usize) -> Result<Tensor<usize>> {
        let n = self.num_windows(seq);
        let mut data = Vec::with_capacity(windows.len() * seq);
        for &w in windows {
            if w >= n {
                return Err(Error::Config(format!(
                    "window {w} out of range: corpus holds {n} windows of {seq} tokens"
                )));
            }
            data.extend_from_slice(self.window(w, seq));
        }
        Ok(Tensor::new(vec![windows.len(), seq], data)?)
    }

    /// Window indices for training step `step`: consecutive windows cycling
    /// through the corpus, so a run resumed at `step` sees the same data.
    pub fn windows_for_step(&self, step: usize, bsz: usize, seq: usize) -> Result<Vec<usize>> {
        let n = self.num_windows(seq);
        if n == 0 {
            return Err(Error::Config(format!(
                "corpus of {} tokens is shorter than one sequence of {seq}",
                self.ids.len()
            )));
        }
        Ok((0..bsz).map(|b| (step * bsz + b) % n).collect())
    }
}

fn parse_id_lines(bytes: &[u8]) -> Option<Vec<usize>> {
    let text = std::str::from_utf8(bytes).ok()?;
    let mut ids = Vec::new();
    for line in text.lines() {
        for tok in line.split_whitespace() {
            ids.push(tok.parse::<usize>().ok()?);
        }
    }
    (!ids.is_empty()).then_some(ids)
}

/// Seeded Markov-chain text: every token has a handful of likely successors,
/// and some positions are uniformly random, so the stream mixes predictable
/// and unpredictable tokens.
pub fn synthetic_corpus(n_tokens: usize, vocab_size: usize, seed: u64) -> Result<TokenCorpus> {
    if vocab_size < 2 || n_tokens == 0 {
        return Err(Error::Config(
            "synthetic corpus needs vocab >= 2 and n_tokens > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fanout = 3.min(vocab_size);
    let successors: Vec<Vec<usize>> = (0..vocab_size)
        .map(|_| (0..fanout).map(|_| rng.gen_range(0..vocab_size)).collect())
        .collect();
    let mut ids = Vec::with_capacity(n_tokens);
    let mut cur = rng.gen_range(0..vocab_size);
    for _ in 0..n_tokens {
        ids.push(cur);
        let r: f64 = rng.gen();
        cur = if r < 0.6 {
            successors[cur][0]
        } else if r < 0.8 {
            successors[cur][1 % fanout]
        } else if r < 0.9 {
            successors[cur][2 % fanout]
        } else {
            rng.gen_range(0..vocab_size)
        };
    }
    TokenCorpus::new(ids, vocab_size)
}
