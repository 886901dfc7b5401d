//! Decoder-only causal transformer recorded on the autograd tape.

mod checkpoint;
mod corpus;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use corpus::{synthetic_corpus, TokenCorpus};
pub use optim::{LrSchedule, OptimConfig, OptimKind, Optimizer};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How the attention block is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionImpl {
    /// One fused node holding Q, K, V and the softmax.
    #[default]
    Fused,
    /// bmm, scale, mask_fill, softmax, bmm as separate nodes.
    Unfused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub attention: AttentionImpl,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-6
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny()
    }
}

impl ModelConfig {
    /// Small model used by tests and the default run configuration.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ffn: 64,
            vocab_size: 64,
            max_seq: 2048,
            attention: AttentionImpl::Fused,
            norm_eps: default_eps(),
        }
    }

    /// Benchmark shape: 4 layers, width 512.
    pub fn bench() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 512,
            n_heads: 8,
            d_ffn: 2048,
            vocab_size: 8192,
            max_seq: 2048,
            attention: AttentionImpl::Fused,
            norm_eps: default_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ffn, self.vocab_size);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("attn_norm"), vec![d]));
            out.push((p("wq"), vec![d, d]));
            out.push((p("wk"), vec![d, d]));
            out.push((p("wv"), vec![d, d]));
            out.push((p("wo"), vec![d, d]));
            out.push((p("ffn_norm"), vec![d]));
            out.push((p("w1"), vec![d, f]));
            out.push((p("w2"), vec![f, d]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("head".to_string(), vec![d, v]));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    /// Seeded initialization: norm gains at one, matrices uniform with
    /// variance `1 / fan_in`, embeddings with unit variance.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if shape.len() == 1 {
                vec![T::one(); n]
            } else {
                let std = if name == "embed" {
                    1.0
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                let bound = std * 3f64.sqrt();
                (0..n)
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Parameters { tensors })
    }

    pub fn from_map(config: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let shapes = config.parameter_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (name, shape) in shapes {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "parameter {name}: expected {shape:?}, got {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Shape(format!("missing parameter {name}"))),
            }
        }
        Ok(Parameters { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.cast()))
            .collect();
        Parameters { tensors }
    }
}

/// Records the forward pass and returns logits `[bsz, seq, vocab]`.
pub fn forward<T: Scalar>(
    config: &ModelConfig,
    params: &Parameters<T>,
    ids: &Tensor<usize>,
    tape: &mut Tape<T>,
) -> Result<Var<T>> {
    Ok(forward_traced(config, params, ids, tape)?.logits)
}

/// Forward result with the ordinals of the tape nodes that carry the
/// residual stream between layers.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Var<T>,
    /// Ordinal of the node producing each layer's input, plus the final
    /// hidden state; index `l` is the input to layer `l`.
    pub residual_nodes: Vec<usize>,
}

pub fn forward_traced<T: Scalar>(
    config: &ModelConfig,
    params: &Parameters<T>,
    ids: &Tensor<usize>,
    tape: &mut Tape<T>,
) -> Result<ForwardOutput<T>> {
    config.validate()?;
    if ids.rank() != 2 {
        return Err(Error::Shape(format!(
            "token ids must be [bsz, seq], got {:?}",
            ids.shape()
        )));
    }
    let (bsz, seq) = (ids.shape()[0], ids.shape()[1]);
    if seq > config.max_seq {
        return Err(Error::SeqTooLong {
            seq,
            max: config.max_seq,
        });
    }
    if let Some(&id) = ids.data().iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: config.vocab_size,
        });
    }
    let (d, heads, hd) = (config.d_model, config.n_heads, config.head_dim());
    let p = |tape: &mut Tape<T>, name: &str| -> Result<Var<T>> {
        let t = params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
        Ok(tape.param(name, t.clone())?)
    };

    let embed = p(tape, "embed")?;
    let x = tape.embedding(&embed, ids)?;
    let mut h = tape.reshape(&x, &[bsz * seq, d])?;
    let mut residual_nodes = Vec::with_capacity(config.n_layers + 1);
    let split_heads = |tape: &mut Tape<T>, v: &Var<T>| -> Result<Var<T>> {
        let v = tape.reshape(v, &[bsz, seq, heads, hd])?;
        Ok(tape.transpose(&v, 1, 2)?)
    };

    for l in 0..config.n_layers {
        residual_nodes.push(h.ordinal().unwrap_or(0));
        let name = |n: &str| format!("layers.{l}.{n}");
        let g = p(tape, &name("attn_norm"))?;
        let x = tape.rms_norm(&h, &g, config.norm_eps)?;
        let wq = p(tape, &name("wq"))?;
        let wk = p(tape, &name("wk"))?;
        let wv = p(tape, &name("wv"))?;
        let q = tape.mm(&x, &wq)?;
        let k = tape.mm(&x, &wk)?;
        let v = tape.mm(&x, &wv)?;
        let q = split_heads(tape, &q)?;
        let k = split_heads(tape, &k)?;
        let v = split_heads(tape, &v)?;
        let o = match config.attention {
            AttentionImpl::Fused => tape.attention(&q, &k, &v, true)?,
            AttentionImpl::Unfused => {
                let kt = tape.transpose(&k, 2, 3)?;
                let a = tape.bmm(&q, &kt)?;
                let a = tape.scale(&a, 1.0 / (hd as f64).sqrt())?;
                let a = tape.causal_mask_fill(&a)?;
                let probs = tape.softmax_probs(&a)?;
                tape.bmm_probs(&probs, &v)?
            }
        };
        let o = tape.transpose(&o, 1, 2)?;
        let o = tape.reshape(&o, &[bsz * seq, d])?;
        let wo = p(tape, &name("wo"))?;
        let o = tape.mm(&o, &wo)?;
        h = tape.add(&h, &o)?;

        let g = p(tape, &name("ffn_norm"))?;
        let x = tape.rms_norm(&h, &g, config.norm_eps)?;
        let w1 = p(tape, &name("w1"))?;
        let w2 = p(tape, &name("w2"))?;
        let u = tape.mm(&x, &w1)?;
        let u = tape.silu(&u)?;
        let u = tape.mm(&u, &w2)?;
        h = tape.add(&h, &u)?;
    }
    residual_nodes.push(h.ordinal().unwrap_or(0));

    let g = p(tape, "final_norm")?;
    let x = tape.rms_norm(&h, &g, config.norm_eps)?;
    let head = p(tape, "head")?;
    let logits = tape.mm(&x, &head)?;
    let logits = tape.reshape(&logits, &[bsz, seq, config.vocab_size])?;
    Ok(ForwardOutput {
        logits,
        residual_nodes,
    })
}

/// Next-token targets `ids[:, 1:]`.
pub fn next_token_targets(ids: &Tensor<usize>) -> Result<Tensor<usize>> {
    let seq = ids.shape()[1];
    if seq < 2 {
        return Err(Error::Shape("need at least two tokens per sequence".into()));
    }
    Ok(ids.narrow(1, 1, seq - 1)?)
}

/// Per-position negative log-likelihood `[bsz, seq-1]` of the next token.
/// The loss runs over all `seq` positions (the last one against a dummy
/// target) and is then narrowed, which avoids copying the logits.
pub fn per_token_nll<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Var<T>,
    ids: &Tensor<usize>,
) -> Result<Var<T>> {
    let next = next_token_targets(ids)?;
    let (bsz, seq) = (ids.shape()[0], ids.shape()[1]);
    let mut targets = Vec::with_capacity(bsz * seq);
    for row in next.data().chunks(seq - 1) {
        targets.extend_from_slice(row);
        targets.push(0);
    }
    let nll = tape.cross_entropy(logits, &Tensor::new(vec![bsz, seq], targets)?)?;
    Ok(tape.slice(&nll, 1, 0, seq - 1)?)
}

/// Mean next-token loss and the per-position nll it averages.
pub fn causal_lm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Var<T>,
    ids: &Tensor<usize>,
) -> Result<(Var<T>, Var<T>)> {
    let nll = per_token_nll(tape, logits, ids)?;
    let loss = tape.mean(&nll)?;
    Ok((loss, nll))
}

#[cfg(test)]
mod tests;
