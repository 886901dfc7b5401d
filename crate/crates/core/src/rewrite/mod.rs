//! Sequence-reduction rewrite of recorded tapes.
//!
//! Offline, a forward pass at prime batch/sequence extents is recorded and
//! every attribute carrying one of those extents becomes a [`PlanEntry`].
//! Online, [`backward_filter`] shrinks those attributes to the kept tokens of
//! a [`FilterMask`](crate::filter::FilterMask) so backward runs dense at the
//! reduced extents.

mod apply;
mod markers;
mod oracle;
mod plan;
mod verify;

#[cfg(test)]
mod tests;

pub use apply::{backward_filter, head_ordinal, rho_filter, Reduction};
pub use markers::{forbidden_extents, is_prime, MarkerConfig};
pub use oracle::{
    mask_attention_activations, mask_attention_with, oracle_masked_backward,
    oracle_masked_backward_observed,
};
pub use plan::{detect, AxisSpec, PlanEntry, ReductionPlan, HEADER_LEN, PLAN_VERSION, RECORD_LEN};
pub use verify::{
    check_equivalence, relative_error, tolerance, verify_plan, Divergence, EquivalenceReport,
    Fault, VerifyReport,
};

use crate::error::Result;
use crate::filter::FilterMask;
use crate::model::{ModelConfig, Parameters};
use crate::tensor::Tensor;
use crate::train::record_step;

/// Builds the reduction plan of `model` from a trace at the marker extents.
pub fn trace_with_markers(model: &ModelConfig, markers: &MarkerConfig) -> Result<ReductionPlan> {
    model.validate()?;
    markers.validate(model)?;
    trace_unvalidated(model, markers)
}

/// As [`trace_with_markers`] without the collision check on the extents; a
/// collision then surfaces as a detector ambiguity, if at all.
pub fn trace_unvalidated(model: &ModelConfig, markers: &MarkerConfig) -> Result<ReductionPlan> {
    let (bsz, seq) = (markers.bsz, markers.seq);
    let config = ModelConfig {
        max_seq: model.max_seq.max(seq),
        ..model.clone()
    };
    let params = Parameters::<f32>::init(&config, 0)?;
    let ids = Tensor::new(
        vec![bsz, seq],
        (0..bsz * seq).map(|i| i % config.vocab_size).collect(),
    )?;
    let mask = FilterMask::keep_all(bsz, seq - 1)?;
    let step = record_step(&config, &params, &ids, Some(&mask))?;
    let mut entries = Vec::new();
    for rec in step.tape.enumerate_attributes() {
        if let Some(entry) = detect(&rec, markers)? {
            entries.push(entry);
        }
    }
    Ok(ReductionPlan {
        version: PLAN_VERSION,
        structure_hash: step.tape.structure_hash(),
        markers: *markers,
        entries,
    })
}
