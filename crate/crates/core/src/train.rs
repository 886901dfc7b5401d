//! Training modes and the per-step pipeline: forward, per-token loss,
//! selection, optional graph rewrite, backward, update.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::autograd::{Gradients, Tape, Var};
use crate::bench::StageTimings;
use crate::error::{Error, Result};
use crate::filter::{excess_loss, filtered_loss, select_topk, FilterMask, ScoredCorpus};
use crate::model::{
    forward_traced, per_token_nll, Checkpoint, ForwardOutput, ModelConfig, Optimizer, Parameters,
    TokenCorpus,
};
use crate::rewrite::{backward_filter, rho_filter, ReductionPlan};
use crate::tensor::{Scalar, Tensor};

/// A recorded forward pass with its loss.
pub struct StepGraph<T> {
    pub tape: Tape<T>,
    pub forward: ForwardOutput<T>,
    pub nll: Var<T>,
    pub loss: Var<T>,
}

/// Records forward and loss. With a mask the loss is the filtered mean over
/// kept positions, otherwise the plain mean.
pub fn record_step<T: Scalar>(
    config: &ModelConfig,
    params: &Parameters<T>,
    ids: &Tensor<usize>,
    mask: Option<&FilterMask>,
) -> Result<StepGraph<T>> {
    let mut tape = Tape::new();
    let forward = forward_traced(config, params, ids, &mut tape)?;
    let nll = per_token_nll(&mut tape, &forward.logits, ids)?;
    let loss = match mask {
        Some(m) => filtered_loss(&mut tape, &nll, m)?,
        None => tape.mean(&nll)?,
    };
    Ok(StepGraph {
        tape,
        forward,
        nll,
        loss,
    })
}

/// How a training step turns a recorded tape into gradients.
pub trait TrainingMode<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the loss is restricted to selected tokens.
    fn filters_loss(&self) -> bool;

    /// Whether [`TrainingMode::prepare`] needs a reduction plan.
    fn needs_plan(&self) -> bool;

    /// Rewrites the tape between loss and backward.
    fn prepare(
        &self,
        tape: &mut Tape<T>,
        mask: &FilterMask,
        plan: Option<&ReductionPlan>,
    ) -> Result<()>;
}

struct Regular;

impl<T: Scalar> TrainingMode<T> for Regular {
    fn name(&self) -> &'static str {
        "regular"
    }

    fn filters_loss(&self) -> bool {
        false
    }

    fn needs_plan(&self) -> bool {
        false
    }

    fn prepare(&self, _: &mut Tape<T>, _: &FilterMask, _: Option<&ReductionPlan>) -> Result<()> {
        Ok(())
    }
}

struct Rho;

impl<T: Scalar> TrainingMode<T> for Rho {
    fn name(&self) -> &'static str {
        "rho"
    }

    fn filters_loss(&self) -> bool {
        true
    }

    fn needs_plan(&self) -> bool {
        true
    }

    fn prepare(
        &self,
        tape: &mut Tape<T>,
        mask: &FilterMask,
        plan: Option<&ReductionPlan>,
    ) -> Result<()> {
        rho_filter(tape, mask, plan.ok_or_else(|| missing_plan("rho"))?)
    }
}

struct Collider;

impl<T: Scalar> TrainingMode<T> for Collider {
    fn name(&self) -> &'static str {
        "collider"
    }

    fn filters_loss(&self) -> bool {
        true
    }

    fn needs_plan(&self) -> bool {
        true
    }

    fn prepare(
        &self,
        tape: &mut Tape<T>,
        mask: &FilterMask,
        plan: Option<&ReductionPlan>,
    ) -> Result<()> {
        backward_filter(tape, mask, plan.ok_or_else(|| missing_plan("collider"))?)
    }
}

fn missing_plan(mode: &str) -> Error {
    Error::Config(format!(
        "mode {mode} needs a reduction plan (run `trace` first)"
    ))
}

/// Training modes by name.
pub struct ModeRegistry<T> {
    modes: BTreeMap<&'static str, Box<dyn TrainingMode<T>>>,
}

impl<T: Scalar> Default for ModeRegistry<T> {
    fn default() -> Self {
        Self::standard()
    }
}

impl<T: Scalar> ModeRegistry<T> {
    /// `regular`, `rho` and `collider`.
    pub fn standard() -> Self {
        let mut r = ModeRegistry {
            modes: BTreeMap::new(),
        };
        r.register(Box::new(Regular));
        r.register(Box::new(Rho));
        r.register(Box::new(Collider));
        r
    }

    pub fn register(&mut self, mode: Box<dyn TrainingMode<T>>) {
        self.modes.insert(mode.name(), mode);
    }

    pub fn get(&self, name: &str) -> Result<&dyn TrainingMode<T>> {
        self.modes.get(name).map(|m| m.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown mode `{name}` (available: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.modes.keys().copied().collect()
    }
}

/// Result of one training step before the optimizer update.
pub struct StepOutput<T> {
    pub loss: f64,
    pub grads: Gradients<T>,
    pub mask: Option<FilterMask>,
    pub timings: StageTimings,
}

/// Runs forward, loss and selection, the mode's rewrite, and backward.
pub fn run_step<T: Scalar>(
    config: &ModelConfig,
    params: &Parameters<T>,
    ids: &Tensor<usize>,
    reference: Option<&Tensor<f64>>,
    k_percent: f64,
    mode: &dyn TrainingMode<T>,
    plan: Option<&ReductionPlan>,
) -> Result<StepOutput<T>> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let forward = forward_traced(config, params, ids, &mut tape)?;
    let t_forward = start.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let nll = per_token_nll(&mut tape, &forward.logits, ids)?;
    drop(forward);
    let (loss, mask) = if mode.filters_loss() {
        let reference = reference
            .ok_or_else(|| Error::Config(format!("mode {} needs reference scores", mode.name())))?;
        let target: Tensor<f64> = nll.value().cast();
        if target.shape() != reference.shape() {
            return Err(Error::Shape(format!(
                "reference scores {:?} are misaligned with the batch's loss positions {:?}",
                reference.shape(),
                target.shape()
            )));
        }
        let mask = select_topk(&excess_loss(&target, reference)?, k_percent)?;
        (filtered_loss(&mut tape, &nll, &mask)?, Some(mask))
    } else {
        (tape.mean(&nll)?, None)
    };
    let t_loss = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let operator_s = match &mask {
        Some(m) if mode.needs_plan() || plan.is_some() => {
            mode.prepare(&mut tape, m, plan)?;
            Some(t0.elapsed().as_secs_f64())
        }
        _ => None,
    };

    let t0 = Instant::now();
    let grads = tape.backward(&loss, &Tensor::scalar(T::one())?)?;
    let t_backward = t0.elapsed().as_secs_f64();
    Ok(StepOutput {
        loss: Scalar::to_f64(loss.value().item()),
        grads,
        mask,
        timings: StageTimings {
            forward_s: t_forward,
            loss_s: t_loss,
            operator_s,
            backward_s: t_backward,
            total_s: start.elapsed().as_secs_f64(),
        },
    })
}

/// Token windows, optionally with precomputed reference scores.
#[derive(Debug, Clone)]
pub enum TrainData {
    Plain(TokenCorpus),
    Scored(ScoredCorpus),
}

impl TrainData {
    pub fn vocab_size(&self) -> usize {
        match self {
            TrainData::Plain(c) => c.vocab_size,
            TrainData::Scored(c) => c.vocab_size,
        }
    }

    /// Batch for zero-based `step`.
    pub fn batch(
        &self,
        step: usize,
        bsz: usize,
        seq: usize,
    ) -> Result<(Tensor<usize>, Option<Tensor<f64>>)> {
        match self {
            TrainData::Plain(c) => Ok((c.batch(&c.windows_for_step(step, bsz, seq)?, seq)?, None)),
            TrainData::Scored(c) => {
                let (ids, nll) = c.batch(&c.records_for_step(step, bsz))?;
                if ids.shape()[1] != seq {
                    return Err(Error::Config(format!(
                        "scored corpus holds sequences of {} tokens, training uses {seq}",
                        ids.shape()[1]
                    )));
                }
                Ok((ids, Some(nll)))
            }
        }
    }
}

/// Per-step log record.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepLog {
    pub step: usize,
    pub mode: String,
    pub loss: f64,
    pub lr: f64,
    pub kept_per_seq: Option<usize>,
    pub timings: StageTimings,
}

/// One update: step pipeline plus optimizer.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    config: &ModelConfig,
    params: &mut Parameters<T>,
    optimizer: &mut Optimizer<T>,
    data: &TrainData,
    step: usize,
    bsz: usize,
    seq: usize,
    k_percent: f64,
    mode: &dyn TrainingMode<T>,
    plan: Option<&ReductionPlan>,
) -> Result<StepLog> {
    let (ids, reference) = data.batch(step, bsz, seq)?;
    let lr = optimizer.config.lr_at(optimizer.step);
    let out = run_step(
        config,
        params,
        &ids,
        reference.as_ref(),
        k_percent,
        mode,
        plan,
    )?;
    optimizer.update(params, &out.grads.params)?;
    Ok(StepLog {
        step,
        mode: mode.name().to_string(),
        loss: out.loss,
        lr,
        kept_per_seq: out.mask.as_ref().map(FilterMask::kept_per_seq),
        timings: out.timings,
    })
}

/// Steps `state.step..steps` of a run; `on_step` sees each log record and
/// the state after its update (for logging and checkpointing).
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    state: &mut Checkpoint<T>,
    data: &TrainData,
    steps: usize,
    bsz: usize,
    seq: usize,
    k_percent: f64,
    mode: &dyn TrainingMode<T>,
    plan: Option<&ReductionPlan>,
    mut on_step: impl FnMut(&StepLog, &Checkpoint<T>) -> Result<()>,
) -> Result<()> {
    if data.vocab_size() > state.config.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary {} exceeds the model's {}",
            data.vocab_size(),
            state.config.vocab_size
        )));
    }
    if mode.needs_plan() && plan.is_none() {
        return Err(missing_plan(mode.name()));
    }
    while state.step < steps {
        let log = train_step(
            &state.config,
            &mut state.params,
            &mut state.optimizer,
            data,
            state.step,
            bsz,
            seq,
            k_percent,
            mode,
            plan,
        )?;
        if !log.loss.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss at step {}", log.step),
            });
        }
        state.step += 1;
        on_step(&log, state)?;
    }
    Ok(())
}
