//! Online application of a reduction plan to a freshly recorded tape.

use std::sync::Arc;

use super::plan::{AxisSpec, PlanEntry, ReductionPlan};
use crate::autograd::{AttrKind, AttrValue, NodeKind, SavedValue, Tape};
use crate::error::{Error, Result};
use crate::filter::FilterMask;
use crate::tensor::{Element, Scalar, Tensor};

/// Kept positions on both the token axis (`seq`) and the loss-position axis
/// (`seq - 1`), derived from a filter mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reduction {
    pub bsz: usize,
    pub seq: usize,
    pub seq_keep: Vec<Vec<usize>>,
    pub loss_keep: Vec<Vec<usize>>,
}

impl Reduction {
    /// Token positions outside the kept loss positions are dropped, which
    /// includes the final position since it predicts nothing. A mask that
    /// keeps every loss position reduces nothing.
    pub fn from_mask(mask: &FilterMask) -> Self {
        let seq = mask.seq_len();
        let seq_keep = if mask.keeps_all() {
            vec![(0..seq).collect(); mask.bsz()]
        } else {
            mask.kept().to_vec()
        };
        Reduction {
            bsz: mask.bsz(),
            seq,
            seq_keep,
            loss_keep: mask.kept().to_vec(),
        }
    }

    pub fn seq_kept(&self) -> usize {
        self.seq_keep[0].len()
    }

    pub fn loss_kept(&self) -> usize {
        self.loss_keep[0].len()
    }

    pub fn is_identity(&self) -> bool {
        self.seq_kept() == self.seq
    }

    fn flat(keep: &[Vec<usize>], stride: usize) -> Vec<usize> {
        keep.iter()
            .enumerate()
            .flat_map(|(b, row)| row.iter().map(move |&i| b * stride + i))
            .collect()
    }

    /// Flattened `b * seq + i` indices of kept tokens.
    pub fn flat_seq(&self) -> Vec<usize> {
        Self::flat(&self.seq_keep, self.seq)
    }

    pub fn flat_loss(&self) -> Vec<usize> {
        Self::flat(&self.loss_keep, self.seq - 1)
    }

    fn full_extent(&self, spec: AxisSpec) -> usize {
        match spec {
            AxisSpec::Seq(_) | AxisSpec::SeqSq(..) => self.seq,
            AxisSpec::LossSeq(_) => self.seq - 1,
            AxisSpec::BszSeq(_) => self.bsz * self.seq,
            AxisSpec::BszLossSeq(_) => self.bsz * (self.seq - 1),
            AxisSpec::Count { .. } => 0,
        }
    }

    fn reduced_extent(&self, spec: AxisSpec) -> usize {
        match spec {
            AxisSpec::Seq(_) | AxisSpec::SeqSq(..) => self.seq_kept(),
            AxisSpec::LossSeq(_) => self.loss_kept(),
            AxisSpec::BszSeq(_) => self.bsz * self.seq_kept(),
            AxisSpec::BszLossSeq(_) => self.bsz * self.loss_kept(),
            AxisSpec::Count { .. } => 0,
        }
    }

    fn axes(spec: AxisSpec) -> Vec<usize> {
        match spec {
            AxisSpec::Seq(a)
            | AxisSpec::LossSeq(a)
            | AxisSpec::BszSeq(a)
            | AxisSpec::BszLossSeq(a) => {
                vec![a as usize]
            }
            AxisSpec::SeqSq(a, b) => vec![a as usize, b as usize],
            AxisSpec::Count { .. } => Vec::new(),
        }
    }

    fn check_shape(
        &self,
        shape: &[usize],
        spec: AxisSpec,
        batch_axis: Option<u8>,
    ) -> std::result::Result<(), String> {
        let full = self.full_extent(spec);
        for a in Self::axes(spec) {
            match shape.get(a) {
                Some(&v) if v == full => {}
                Some(&v) => {
                    return Err(format!(
                        "axis {a} has extent {v}, expected {full} for {spec}"
                    ))
                }
                None => return Err(format!("axis {a} out of range for shape {shape:?}")),
            }
        }
        if let Some(b) = batch_axis {
            match shape.get(b as usize) {
                Some(&v) if v == self.bsz => {}
                other => {
                    return Err(format!(
                        "batch axis {b} has extent {other:?}, expected {}",
                        self.bsz
                    ))
                }
            }
        }
        Ok(())
    }

    /// Shape after reduction.
    pub fn reduce_shape(
        &self,
        shape: &[usize],
        spec: AxisSpec,
    ) -> std::result::Result<Vec<usize>, String> {
        self.check_shape(shape, spec, None)?;
        let mut out = shape.to_vec();
        for a in Self::axes(spec) {
            out[a] = self.reduced_extent(spec);
        }
        Ok(out)
    }

    /// Count after substituting kept extents for `seq` and `seq - 1`.
    pub fn reduce_count(&self, count: usize, spec: AxisSpec) -> std::result::Result<usize, String> {
        let AxisSpec::Count { seq_pow, loss_pow } = spec else {
            return Err(format!("{spec} is not a count spec"));
        };
        let mut c = count;
        for (base, kept, pow) in [
            (self.seq, self.seq_kept(), seq_pow),
            (self.seq - 1, self.loss_kept(), loss_pow),
        ] {
            for _ in 0..pow {
                if !c.is_multiple_of(base) {
                    return Err(format!("count {count} is not divisible by {base}^{pow}"));
                }
                c = c / base * kept;
            }
        }
        Ok(c)
    }

    /// Gathers the kept slices of a tensor along the axes of `spec`.
    pub fn reduce_tensor<E: Element>(
        &self,
        t: &Tensor<E>,
        spec: AxisSpec,
        batch_axis: Option<u8>,
    ) -> std::result::Result<Tensor<E>, String> {
        self.check_shape(t.shape(), spec, batch_axis)?;
        if self.is_identity() {
            return Ok(t.clone());
        }
        let batched = |axes: &[usize], keep: &[Vec<usize>]| {
            let b = batch_axis.ok_or_else(|| format!("{spec} needs a batch axis"))?;
            t.gather_axes_batched(b as usize, axes, keep)
                .map_err(|e| e.to_string())
        };
        match spec {
            AxisSpec::Seq(a) => batched(&[a as usize], &self.seq_keep),
            AxisSpec::LossSeq(a) => batched(&[a as usize], &self.loss_keep),
            AxisSpec::SeqSq(a, b) => batched(&[a as usize, b as usize], &self.seq_keep),
            AxisSpec::BszSeq(a) => t
                .gather_axis(a as usize, &self.flat_seq())
                .map_err(|e| e.to_string()),
            AxisSpec::BszLossSeq(a) => t
                .gather_axis(a as usize, &self.flat_loss())
                .map_err(|e| e.to_string()),
            AxisSpec::Count { .. } => Err(format!("{spec} does not apply to a tensor")),
        }
    }
}

fn entry_error(entry: &PlanEntry, name: &str, reason: impl Into<String>) -> Error {
    Error::PlanEntry {
        ordinal: entry.ordinal as usize,
        node_type: entry.node_type.to_string(),
        attribute: name.to_string(),
        reason: reason.into(),
    }
}

fn apply_entry<T: Scalar>(tape: &mut Tape<T>, entry: &PlanEntry, red: &Reduction) -> Result<()> {
    let ordinal = entry.ordinal as usize;
    let node = tape.node(ordinal).map_err(|_| {
        entry_error(
            entry,
            &format!("#{}", entry.attribute),
            "node missing from tape",
        )
    })?;
    if node.kind() != entry.node_type {
        return Err(entry_error(
            entry,
            &format!("#{}", entry.attribute),
            format!("tape has a {} node here", node.kind()),
        ));
    }
    let attrs = node.attributes();
    let rec = attrs
        .get(entry.attribute as usize)
        .ok_or_else(|| entry_error(entry, &format!("#{}", entry.attribute), "attribute missing"))?;
    if rec.kind != entry.kind {
        return Err(entry_error(
            entry,
            rec.name,
            format!("attribute is a {}, plan says {}", rec.kind, entry.kind),
        ));
    }
    let name = rec.name;
    let fail = |r: String| entry_error(entry, name, r);
    let value = match entry.kind {
        AttrKind::SavedTensor => {
            let saved = match node.saved(name)? {
                SavedValue::Real(t) => SavedValue::Real(
                    red.reduce_tensor(t, entry.spec, entry.batch_axis)
                        .map_err(fail)?,
                ),
                SavedValue::Index(t) => SavedValue::Index(
                    red.reduce_tensor(t, entry.spec, entry.batch_axis)
                        .map_err(fail)?,
                ),
            };
            AttrValue::Saved(saved)
        }
        AttrKind::SizeArray => {
            AttrValue::Sizes(red.reduce_shape(&rec.value, entry.spec).map_err(fail)?)
        }
        AttrKind::InputMetadata => {
            AttrValue::Metadata(red.reduce_shape(&rec.value, entry.spec).map_err(fail)?)
        }
        AttrKind::ScalarCount => {
            AttrValue::Count(red.reduce_count(rec.value[0], entry.spec).map_err(fail)?)
        }
    };
    tape.mutate_attribute(ordinal, name, value)?;
    Ok(())
}

fn check_plan<T: Scalar>(tape: &Tape<T>, plan: &ReductionPlan) -> Result<()> {
    let hash = tape.structure_hash();
    if hash != plan.structure_hash {
        return Err(Error::HashMismatch {
            plan: plan.structure_hash.to_string(),
            tape: hash.to_string(),
        });
    }
    Ok(())
}

/// Shrinks every planned attribute of `tape` to the kept positions of
/// `mask`, so the following backward runs at reduced extents. Attention
/// matrices lose the rows and columns of dropped tokens.
pub fn backward_filter<T: Scalar>(
    tape: &mut Tape<T>,
    mask: &FilterMask,
    plan: &ReductionPlan,
) -> Result<()> {
    check_plan(tape, plan)?;
    let red = Reduction::from_mask(mask);
    for entry in &plan.entries {
        apply_entry(tape, entry, &red)?;
    }
    Ok(())
}

/// Ordinal of the output-head projection: the last GEMM on the tape.
pub fn head_ordinal<T: Scalar>(tape: &Tape<T>) -> Option<usize> {
    tape.nodes().iter().rposition(|n| n.kind() == NodeKind::Mm)
}

/// Loss-only filtering: reduces only the output head and the loss, then
/// scatters the head's input gradient back to full size so the rest of the
/// backward runs dense with attention activations untouched.
pub fn rho_filter<T: Scalar>(
    tape: &mut Tape<T>,
    mask: &FilterMask,
    plan: &ReductionPlan,
) -> Result<()> {
    check_plan(tape, plan)?;
    let red = Reduction::from_mask(mask);
    if red.is_identity() {
        return Ok(());
    }
    let head =
        head_ordinal(tape).ok_or_else(|| Error::Config("tape has no output projection".into()))?;
    for entry in plan.entries.iter().filter(|e| e.ordinal as usize >= head) {
        apply_entry(tape, entry, &red)?;
    }
    let flat = red.flat_seq();
    let full = red.bsz * red.seq;
    tape.set_edge_transform(
        head,
        0,
        Arc::new(move |g: &Tensor<T>| g.scatter_axis(0, &flat, full, T::zero())),
    )?;
    Ok(())
}
