//! Plan regression checks: re-trace diffing and reduced-vs-oracle
//! equivalence with divergence localization.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::apply::{backward_filter, Reduction};
use super::markers::MarkerConfig;
use super::oracle::oracle_masked_backward_observed;
use super::plan::{AxisSpec, ReductionPlan};
use super::trace_with_markers;
use crate::autograd::{AttrKind, AttrValue, Edge, GraphError, NodeGradients, SavedValue, Tape};
use crate::error::{Error, Result};
use crate::filter::{select_topk, FilterMask};
use crate::model::{ModelConfig, Parameters};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::train::record_step;

/// Deliberate corruption for exercising the localization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Scales the first real saved tensor of a node after the rewrite.
    PerturbSaved { ordinal: usize },
    /// Removes one plan entry before the rewrite.
    DropEntry { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    pub ordinal: usize,
    pub node_type: String,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub precision: String,
    pub bsz: usize,
    pub seq: usize,
    pub k_percent: f64,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub tolerance: f64,
    pub divergence: Option<Divergence>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub plan_entries: usize,
    pub fresh_entries: usize,
    pub fresh_markers: MarkerConfig,
    pub plan_hash: String,
    pub fresh_hash: String,
    pub hash_matches: bool,
    /// Index of the first entry that differs from the fresh trace.
    pub first_difference: Option<usize>,
    pub equivalence: Option<EquivalenceReport>,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Gradient tolerance for the reduced-vs-oracle comparison.
pub fn tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::F32 => 1e-5,
        Precision::F64 => 1e-10,
    }
}

/// `max|a - b| / max|b|`; absolute when `b` is all zeros, infinite when the
/// shapes differ.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        diff = diff.max((Scalar::to_f64(x) - Scalar::to_f64(y)).abs());
        scale = scale.max(Scalar::to_f64(y).abs());
    }
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

struct Observed<T> {
    incoming: Tensor<T>,
    outputs: Vec<Option<Tensor<T>>>,
}

fn recorder<T: Scalar>(
    into: &mut BTreeMap<usize, Observed<T>>,
) -> impl FnMut(&NodeGradients<'_, T>) + '_ {
    move |g| {
        into.insert(
            g.ordinal,
            Observed {
                incoming: g.incoming.clone(),
                outputs: g.outputs.to_vec(),
            },
        );
    }
}

fn perturb_saved<T: Scalar>(tape: &mut Tape<T>, ordinal: usize) -> Result<()> {
    let node = tape.node(ordinal)?;
    let (name, t) = node
        .saved_vars()
        .iter()
        .find_map(|s| match &s.value {
            SavedValue::Real(t) => Some((s.name, t.clone())),
            SavedValue::Index(_) => None,
        })
        .ok_or_else(|| {
            Error::Config(format!(
                "node {ordinal} ({}) saves no real tensor",
                node.kind()
            ))
        })?;
    let bumped = t.map("perturb", |x| x * T::from_f64(1.5) + T::from_f64(0.1))?;
    tape.mutate_attribute(ordinal, name, AttrValue::Saved(SavedValue::Real(bumped)))?;
    Ok(())
}

/// Node an error was raised at, if it names one.
fn error_site(e: &Error) -> Option<(usize, String)> {
    match e {
        Error::PlanEntry {
            ordinal, node_type, ..
        } => Some((*ordinal, node_type.clone())),
        Error::Graph(g) => match g {
            GraphError::AtNode {
                ordinal, node_type, ..
            }
            | GraphError::MetadataMismatch {
                ordinal, node_type, ..
            }
            | GraphError::SavedSizeMismatch {
                ordinal, node_type, ..
            }
            | GraphError::NonFiniteGradient { ordinal, node_type } => {
                Some((*ordinal, node_type.to_string()))
            }
            GraphError::UnknownAttribute { ordinal, .. }
            | GraphError::AttributeKind { ordinal, .. }
            | GraphError::RankChange { ordinal, .. } => Some((*ordinal, String::from("?"))),
            _ => None,
        },
        _ => None,
    }
}

/// First node, in backward order, whose incoming gradient agrees with the
/// reduced oracle while one of its outgoing gradients does not.
fn localize<T: Scalar>(
    tape: &Tape<T>,
    plan: &ReductionPlan,
    mask: &FilterMask,
    oracle: &BTreeMap<usize, Observed<T>>,
    reduced: &BTreeMap<usize, Observed<T>>,
    tol: f64,
) -> Option<Divergence> {
    let red = Reduction::from_mask(mask);
    let meta: HashMap<usize, (AxisSpec, Option<u8>)> = plan
        .entries
        .iter()
        .filter(|e| e.kind == AttrKind::InputMetadata)
        .map(|e| (e.ordinal as usize, (e.spec, e.batch_axis)))
        .collect();
    let shrink = |t: &Tensor<T>, owner: Option<usize>| match owner.and_then(|o| meta.get(&o)) {
        Some(&(spec, batch)) => red.reduce_tensor(t, spec, batch).ok(),
        None => Some(t.clone()),
    };
    let err =
        |a: &Tensor<T>, b: Option<Tensor<T>>| b.map_or(f64::INFINITY, |b| relative_error(a, &b));

    for (&ord, r) in reduced.iter().rev() {
        let Some(o) = oracle.get(&ord) else { continue };
        if err(&r.incoming, shrink(&o.incoming, Some(ord))) > tol {
            continue;
        }
        let node = tape.node(ord).ok()?;
        for (i, (ro, oo)) in r.outputs.iter().zip(&o.outputs).enumerate() {
            let owner = match node.inputs()[i] {
                Edge::Node(p) => Some(p),
                _ => None,
            };
            let detail = match (ro, oo) {
                (Some(a), Some(b)) => {
                    let e = err(a, shrink(b, owner));
                    (e > tol)
                        .then(|| format!("gradient for input {i} differs (relative error {e:.3e})"))
                }
                (None, None) => None,
                _ => Some(format!("gradient for input {i} present on one side only")),
            };
            if let Some(detail) = detail {
                return Some(Divergence {
                    ordinal: ord,
                    node_type: node.kind().to_string(),
                    detail,
                });
            }
        }
    }
    None
}

/// Compares parameter gradients of the rewritten backward with the masked
/// oracle on random ids and a random mask, at the given shape.
#[allow(clippy::too_many_arguments)]
pub fn check_equivalence<T: Scalar>(
    model: &ModelConfig,
    plan: &ReductionPlan,
    bsz: usize,
    seq: usize,
    k_percent: f64,
    seed: u64,
    fault: Option<Fault>,
) -> Result<EquivalenceReport> {
    let config = ModelConfig {
        max_seq: model.max_seq.max(seq),
        ..model.clone()
    };
    let params = Parameters::<T>::init(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    let ids: Vec<usize> = (0..bsz * seq)
        .map(|_| rng.gen_range(0..config.vocab_size))
        .collect();
    let ids = Tensor::new(vec![bsz, seq], ids)?;
    let scores: Vec<f64> = (0..bsz * (seq - 1)).map(|_| rng.gen()).collect();
    let mask = select_topk(&Tensor::new(vec![bsz, seq - 1], scores)?, k_percent)?;
    let tol = tolerance(T::PRECISION);

    let step = record_step(&config, &params, &ids, Some(&mask))?;
    let mut oracle_tape = step.tape.clone();
    let mut reduced_tape = step.tape;
    let mut applied = plan.clone();
    if let Some(Fault::DropEntry { index }) = fault {
        if index >= applied.entries.len() {
            return Err(Error::Config(format!(
                "plan has {} entries, cannot drop entry {index}",
                applied.entries.len()
            )));
        }
        applied.entries.remove(index);
    }

    let mut oracle_obs = BTreeMap::new();
    let oracle = oracle_masked_backward_observed(
        &mut oracle_tape,
        &step.loss,
        &mask,
        recorder(&mut oracle_obs),
    )?;

    let mut reduced_obs = BTreeMap::new();
    let reduced = match backward_filter(&mut reduced_tape, &mask, &applied) {
        Ok(()) => {
            if let Some(Fault::PerturbSaved { ordinal }) = fault {
                perturb_saved(&mut reduced_tape, ordinal)?;
            }
            let seed_grad = Tensor::scalar(T::one())?;
            reduced_tape
                .backward_observed(&step.loss, &seed_grad, recorder(&mut reduced_obs))
                .map_err(Error::from)
        }
        Err(e) => Err(e),
    };

    let mut report = EquivalenceReport {
        precision: T::PRECISION.to_string(),
        bsz,
        seq,
        k_percent,
        seed,
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        tolerance: tol,
        divergence: None,
        passed: false,
    };
    let grads = match reduced {
        Ok(g) => g,
        Err(e) => {
            let Some((ordinal, node_type)) = error_site(&e) else {
                return Err(e);
            };
            report.max_rel_error = f64::INFINITY;
            report.divergence = Some(Divergence {
                ordinal,
                node_type,
                detail: e.to_string(),
            });
            return Ok(report);
        }
    };
    for (name, want) in &oracle.params {
        let e = grads
            .get(name)
            .map_or(f64::INFINITY, |got| relative_error(got, want));
        if e > report.max_rel_error || report.worst_parameter.is_empty() {
            report.max_rel_error = e;
            report.worst_parameter = name.clone();
        }
    }
    report.passed = report.max_rel_error < tol;
    if !report.passed {
        report.divergence = localize(&oracle_tape, plan, &mask, &oracle_obs, &reduced_obs, tol);
    }
    Ok(report)
}

/// Re-traces `model` with the next marker primes, diffs against `plan`,
/// and runs one 64-bit equivalence check at a small random shape.
pub fn verify_plan(
    plan: &ReductionPlan,
    model: &ModelConfig,
    seed: u64,
    fault: Option<Fault>,
) -> Result<VerifyReport> {
    let fresh_markers = MarkerConfig {
        bsz: plan.markers.bsz + 1,
        seq: plan.markers.seq + 1,
    }
    .pick_for(model)?;
    let fresh = trace_with_markers(model, &fresh_markers)?;
    let hash_matches = fresh.structure_hash == plan.structure_hash;
    let first_difference = plan.first_difference(&fresh);
    let mut failures = Vec::new();
    if !hash_matches {
        failures.push(format!(
            "structure hash mismatch: plan {} vs model {}",
            plan.structure_hash, fresh.structure_hash
        ));
    }
    if let Some(i) = first_difference {
        failures.push(format!("plan differs from fresh trace at entry {i}"));
    }
    let equivalence = if failures.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bsz = rng.gen_range(1..=3);
        let seq = rng.gen_range(8..=24);
        let k = [25.0, 50.0, 75.0][rng.gen_range(0..3)];
        let r = check_equivalence::<f64>(model, plan, bsz, seq, k, seed, fault)?;
        if !r.passed {
            let at = r.divergence.as_ref().map_or(String::new(), |d| {
                format!(
                    ", first divergence at node {} ({}): {}",
                    d.ordinal, d.node_type, d.detail
                )
            });
            failures.push(format!(
                "gradients differ from oracle: relative error {:.3e} on {}{at}",
                r.max_rel_error, r.worst_parameter
            ));
        }
        Some(r)
    } else {
        None
    };
    Ok(VerifyReport {
        plan_entries: plan.len(),
        fresh_entries: fresh.len(),
        fresh_markers,
        plan_hash: plan.structure_hash.to_string(),
        fresh_hash: fresh.structure_hash.to_string(),
        hash_matches,
        first_difference,
        equivalence,
        passed: failures.is_empty(),
        failures,
    })
}
