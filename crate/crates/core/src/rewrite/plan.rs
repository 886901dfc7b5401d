//! Reduction plans: which attributes of which nodes carry batch/sequence
//! extents, discovered on a marker trace and persisted as a binary file.
//!
//! File layout (little endian):
//!
//! ```text
//! magic      8 bytes  "BKSVPLAN"
//! version    u32
//! hash       32 bytes structure hash of the traced tape
//! bsz marker u32
//! seq marker u32
//! count      u32
//! record*    u32 ordinal, u16 node type, u16 attribute id, u8 kind,
//!            u8 axis spec, u8 axis0, u8 axis1
//! ```
//!
//! The axis-spec byte holds the spec code in its low nibble and the batch
//! axis plus one in its high nibble (zero when the attribute has none). For
//! count entries the two axis bytes are the exponents of `seq` and `seq-1`.

use std::fmt;
use std::fs;
use std::path::Path;

use super::markers::MarkerConfig;
use crate::autograd::{AttrKind, AttributeRecord, NodeKind, StructureHash};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BKSVPLAN";
pub const PLAN_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 32 + 4 + 4 + 4;
pub const RECORD_LEN: usize = 12;

/// Which axes of an attribute to shrink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AxisSpec {
    /// A pure sequence axis.
    Seq(u8),
    /// A flattened batch x sequence axis.
    BszSeq(u8),
    /// Two sequence axes of a seq x seq attention attribute.
    SeqSq(u8, u8),
    /// The loss-position axis (`seq - 1` long).
    LossSeq(u8),
    /// A flattened batch x loss-position axis.
    BszLossSeq(u8),
    /// A scalar count equal to `c * seq^p * (seq-1)^q`.
    Count { seq_pow: u8, loss_pow: u8 },
}

impl AxisSpec {
    fn code(self) -> (u8, u8, u8) {
        match self {
            AxisSpec::Seq(a) => (0, a, 0),
            AxisSpec::BszSeq(a) => (1, a, 0),
            AxisSpec::SeqSq(a, b) => (2, a, b),
            AxisSpec::LossSeq(a) => (3, a, 0),
            AxisSpec::BszLossSeq(a) => (4, a, 0),
            AxisSpec::Count { seq_pow, loss_pow } => (5, seq_pow, loss_pow),
        }
    }

    fn from_code(code: u8, a: u8, b: u8) -> Option<AxisSpec> {
        Some(match code {
            0 => AxisSpec::Seq(a),
            1 => AxisSpec::BszSeq(a),
            2 => AxisSpec::SeqSq(a, b),
            3 => AxisSpec::LossSeq(a),
            4 => AxisSpec::BszLossSeq(a),
            5 => AxisSpec::Count {
                seq_pow: a,
                loss_pow: b,
            },
            _ => return None,
        })
    }
}

impl fmt::Display for AxisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisSpec::Seq(a) => write!(f, "seq(axis {a})"),
            AxisSpec::BszSeq(a) => write!(f, "bszseq(axis {a})"),
            AxisSpec::SeqSq(a, b) => write!(f, "seq_sq(axes {a},{b})"),
            AxisSpec::LossSeq(a) => write!(f, "lossseq(axis {a})"),
            AxisSpec::BszLossSeq(a) => write!(f, "bszlossseq(axis {a})"),
            AxisSpec::Count { seq_pow, loss_pow } => {
                write!(f, "count(seq^{seq_pow} lossseq^{loss_pow})")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub ordinal: u32,
    pub node_type: NodeKind,
    /// Index of the attribute in its node's listing.
    pub attribute: u16,
    pub kind: AttrKind,
    pub spec: AxisSpec,
    /// Axis indexing sequences, for per-sequence gathers.
    pub batch_axis: Option<u8>,
}

impl PlanEntry {
    fn encode(&self, out: &mut Vec<u8>) {
        let (code, a0, a1) = self.spec.code();
        let batch = self.batch_axis.map_or(0, |b| b + 1);
        out.extend_from_slice(&self.ordinal.to_le_bytes());
        out.extend_from_slice(&self.node_type.id().to_le_bytes());
        out.extend_from_slice(&self.attribute.to_le_bytes());
        out.push(self.kind as u8);
        out.push((batch << 4) | code);
        out.push(a0);
        out.push(a1);
    }

    fn decode(b: &[u8]) -> std::result::Result<PlanEntry, String> {
        let ordinal = u32::from_le_bytes(b[0..4].try_into().unwrap());
        let node_id = u16::from_le_bytes(b[4..6].try_into().unwrap());
        let attribute = u16::from_le_bytes(b[6..8].try_into().unwrap());
        let node_type =
            NodeKind::from_id(node_id).ok_or(format!("unknown node type id {node_id}"))?;
        let kind = AttrKind::from_id(b[8]).ok_or(format!("unknown attribute kind {}", b[8]))?;
        let spec = AxisSpec::from_code(b[9] & 0x0f, b[10], b[11])
            .ok_or(format!("unknown axis spec code {}", b[9] & 0x0f))?;
        let batch = b[9] >> 4;
        Ok(PlanEntry {
            ordinal,
            node_type,
            attribute,
            kind,
            spec,
            batch_axis: (batch > 0).then(|| batch - 1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReductionPlan {
    pub version: u32,
    pub structure_hash: StructureHash,
    pub markers: MarkerConfig,
    pub entries: Vec<PlanEntry>,
}

impl ReductionPlan {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.entries.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.structure_hash.0);
        out.extend_from_slice(&(self.markers.bsz as u32).to_le_bytes());
        out.extend_from_slice(&(self.markers.seq as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            e.encode(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err("not a reduction plan file".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != PLAN_VERSION {
            return Err(format!(
                "unsupported plan version {version} (expected {PLAN_VERSION})"
            ));
        }
        let hash: [u8; 32] = bytes[12..44].try_into().unwrap();
        let markers = MarkerConfig {
            bsz: u32_at(44) as usize,
            seq: u32_at(48) as usize,
        };
        let count = u32_at(52) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * RECORD_LEN {
            return Err(format!(
                "plan declares {count} records but holds {} bytes of record data",
                body.len()
            ));
        }
        let entries = body
            .chunks_exact(RECORD_LEN)
            .map(PlanEntry::decode)
            .collect::<std::result::Result<_, _>>()?;
        Ok(ReductionPlan {
            version,
            structure_hash: StructureHash(hash),
            markers,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|r| Error::format(path, r))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// First entry that differs from `other`, by position.
    pub fn first_difference(&self, other: &ReductionPlan) -> Option<usize> {
        let n = self.entries.len().min(other.entries.len());
        (0..n)
            .find(|&i| self.entries[i] != other.entries[i])
            .or((self.entries.len() != other.entries.len()).then_some(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AxisClass {
    Batch,
    Seq,
    LossSeq,
    BszSeq,
    BszLossSeq,
    Other,
}

fn classify(v: usize, m: &MarkerConfig) -> AxisClass {
    let (b, s) = (m.bsz, m.seq);
    if v == s {
        AxisClass::Seq
    } else if v == s - 1 {
        AxisClass::LossSeq
    } else if v == b * s {
        AxisClass::BszSeq
    } else if v == b * (s - 1) {
        AxisClass::BszLossSeq
    } else if v == b {
        AxisClass::Batch
    } else {
        AxisClass::Other
    }
}

fn power_of(mut v: usize, base: usize) -> (usize, u8) {
    let mut p = 0;
    while v > 0 && v.is_multiple_of(base) {
        v /= base;
        p += 1;
    }
    (v, p)
}

/// Classifies one attribute of a marker-traced tape. Returns `None` for
/// attributes with no batch/sequence extent.
pub fn detect(rec: &AttributeRecord, markers: &MarkerConfig) -> Result<Option<PlanEntry>> {
    let ambiguous = |value: usize, reason: &str| Error::Ambiguous {
        value,
        location: format!(
            "node {} ({}) attribute `{}` {:?}",
            rec.ordinal, rec.node_type, rec.name, rec.value
        ),
        reason: reason.to_string(),
    };
    let entry = |spec, batch_axis| PlanEntry {
        ordinal: rec.ordinal as u32,
        node_type: rec.node_type,
        attribute: rec.index,
        kind: rec.kind,
        spec,
        batch_axis,
    };

    if rec.kind == AttrKind::ScalarCount {
        let c = rec.value[0];
        let (rest, seq_pow) = power_of(c, markers.seq);
        let (_, loss_pow) = power_of(rest, markers.seq - 1);
        if seq_pow == 0 && loss_pow == 0 {
            return Ok(None);
        }
        return Ok(Some(entry(AxisSpec::Count { seq_pow, loss_pow }, None)));
    }

    let mut marked = Vec::new();
    let mut batch = None;
    for (axis, &v) in rec.value.iter().enumerate() {
        if axis > u8::MAX as usize {
            return Err(ambiguous(v, "too many axes"));
        }
        match classify(v, markers) {
            AxisClass::Other => {
                if v % markers.seq == 0 || v % (markers.seq - 1) == 0 {
                    return Err(ambiguous(
                        v,
                        "multiple of a sequence marker with no known meaning",
                    ));
                }
            }
            AxisClass::Batch => {
                if batch.replace(axis as u8).is_some() {
                    return Err(ambiguous(v, "two axes match the batch marker"));
                }
            }
            class => marked.push((axis as u8, class)),
        }
    }
    let spec = match marked.as_slice() {
        [] => return Ok(None),
        [(a, AxisClass::Seq)] => AxisSpec::Seq(*a),
        [(a, AxisClass::LossSeq)] => AxisSpec::LossSeq(*a),
        [(a, AxisClass::BszSeq)] => AxisSpec::BszSeq(*a),
        [(a, AxisClass::BszLossSeq)] => AxisSpec::BszLossSeq(*a),
        [(a, AxisClass::Seq), (b, AxisClass::Seq)] => AxisSpec::SeqSq(*a, *b),
        _ => {
            return Err(ambiguous(
                rec.value[marked[0].0 as usize],
                "unsupported combination of sequence axes",
            ))
        }
    };
    if matches!(spec, AxisSpec::SeqSq(..))
        && rec.kind == AttrKind::SavedTensor
        && !rec.attention_probs
    {
        return Err(ambiguous(
            markers.seq,
            "seq x seq saved tensor that is not an attention matrix",
        ));
    }
    let per_sequence = matches!(
        spec,
        AxisSpec::Seq(_) | AxisSpec::LossSeq(_) | AxisSpec::SeqSq(..)
    );
    if rec.kind == AttrKind::SavedTensor && per_sequence && batch.is_none() {
        return Err(ambiguous(
            markers.seq,
            "saved tensor has a sequence axis but no batch axis",
        ));
    }
    Ok(Some(entry(spec, batch)))
}
