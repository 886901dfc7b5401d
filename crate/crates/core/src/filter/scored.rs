//! Scored-corpus files: token windows with aligned reference nll.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "BKSVSCOR"
//! version  u32
//! vocab    u32
//! count    u64      number of records
//! record*  u32 len, len x u32 token ids, (len - 1) x f64 reference nll
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TokenCorpus;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BKSVSCOR";
pub const SCORED_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub ids: Vec<usize>,
    /// `ref_nll[i]` scores predicting `ids[i + 1]`.
    pub ref_nll: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCorpus {
    pub vocab_size: usize,
    pub sequences: Vec<ScoredSequence>,
}

impl ScoredCorpus {
    pub fn new(vocab_size: usize, sequences: Vec<ScoredSequence>) -> Result<Self> {
        for (i, s) in sequences.iter().enumerate() {
            if s.ids.len() < 2 || s.ref_nll.len() + 1 != s.ids.len() {
                return Err(Error::Filter(format!(
                    "record {i}: {} ids with {} reference scores are misaligned",
                    s.ids.len(),
                    s.ref_nll.len()
                )));
            }
            if let Some(&id) = s.ids.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: vocab_size,
                });
            }
            if s.ref_nll.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("reference score in record {i}"),
                });
            }
        }
        Ok(ScoredCorpus {
            vocab_size,
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Token ids `[bsz, seq]` and reference scores `[bsz, seq - 1]` of the
    /// given records, which must share one length.
    pub fn batch(&self, records: &[usize]) -> Result<(Tensor<usize>, Tensor<f64>)> {
        let first = records
            .first()
            .ok_or_else(|| Error::Filter("empty batch".into()))?;
        let seq = self
            .sequences
            .get(*first)
            .ok_or_else(|| Error::Filter(format!("record {first} out of range")))?
            .ids
            .len();
        let mut ids = Vec::with_capacity(records.len() * seq);
        let mut nll = Vec::with_capacity(records.len() * (seq - 1));
        for &r in records {
            let s = self
                .sequences
                .get(r)
                .ok_or_else(|| Error::Filter(format!("record {r} out of range")))?;
            if s.ids.len() != seq {
                return Err(Error::Filter(format!(
                    "record {r} has {} tokens, batch expects {seq}",
                    s.ids.len()
                )));
            }
            ids.extend_from_slice(&s.ids);
            nll.extend_from_slice(&s.ref_nll);
        }
        Ok((
            Tensor::new(vec![records.len(), seq], ids)?,
            Tensor::new(vec![records.len(), seq - 1], nll)?,
        ))
    }

    /// Record indices for training step `step`, cycling in order.
    pub fn records_for_step(&self, step: usize, bsz: usize) -> Vec<usize> {
        (0..bsz)
            .map(|b| (step * bsz + b) % self.len().max(1))
            .collect()
    }
}

/// Cuts `corpus` into windows of `seq` tokens and scores each with
/// `scorer`, which maps `[bsz, seq]` ids to `[bsz, seq - 1]` nll.
pub fn score_corpus(
    corpus: &TokenCorpus,
    seq: usize,
    chunk: usize,
    mut scorer: impl FnMut(&Tensor<usize>) -> Result<Tensor<f64>>,
) -> Result<ScoredCorpus> {
    let n = corpus.num_windows(seq);
    if n == 0 || seq < 2 {
        return Err(Error::Config(format!(
            "corpus of {} tokens holds no window of {seq} tokens",
            corpus.len()
        )));
    }
    let mut sequences = Vec::with_capacity(n);
    let windows: Vec<usize> = (0..n).collect();
    for group in windows.chunks(chunk.max(1)) {
        let ids = corpus.batch(group, seq)?;
        let nll = scorer(&ids)?;
        if nll.shape() != [group.len(), seq - 1] {
            return Err(Error::Shape(format!(
                "scorer returned {:?} for a [{}, {seq}] batch",
                nll.shape(),
                group.len()
            )));
        }
        for (ids, nll) in ids.data().chunks(seq).zip(nll.data().chunks(seq - 1)) {
            sequences.push(ScoredSequence {
                ids: ids.to_vec(),
                ref_nll: nll.to_vec(),
            });
        }
    }
    ScoredCorpus::new(corpus.vocab_size, sequences)
}

pub fn write_scored(path: &Path, corpus: &ScoredCorpus) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCORED_VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.sequences.len() as u64).to_le_bytes());
    for s in &corpus.sequences {
        out.extend_from_slice(&(s.ids.len() as u32).to_le_bytes());
        for &id in &s.ids {
            out.extend_from_slice(&(id as u32).to_le_bytes());
        }
        for &v in &s.ref_nll {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn read_scored(path: &Path) -> Result<ScoredCorpus> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = || Error::format(path, "truncated scored-corpus file");
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(Error::format(path, "not a scored-corpus file"));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != SCORED_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported scored-corpus version {version} (expected {SCORED_VERSION})"),
        ));
    }
    let vocab = r.u32().ok_or_else(truncated)? as usize;
    let count = r.u64().ok_or_else(truncated)? as usize;
    let mut sequences = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let ids = (0..len)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        let ref_nll = (0..len.saturating_sub(1))
            .map(|_| r.f64())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        sequences.push(ScoredSequence { ids, ref_nll });
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    ScoredCorpus::new(vocab, sequences).map_err(|e| Error::format(path, e.to_string()))
}
