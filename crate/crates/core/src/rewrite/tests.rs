use std::sync::OnceLock;

use super::*;
use crate::autograd::{AttrKind, AttributeRecord, NodeKind, Tape};
use crate::error::Error;
use crate::filter::FilterMask;
use crate::model::ModelConfig;
use crate::tensor::Tensor;

fn tiny_plan() -> &'static ReductionPlan {
    static PLAN: OnceLock<ReductionPlan> = OnceLock::new();
    PLAN.get_or_init(|| trace_with_markers(&ModelConfig::tiny(), &MarkerConfig::default()).unwrap())
}

fn record(kind: AttrKind, value: Vec<usize>, probs: bool) -> AttributeRecord {
    AttributeRecord {
        ordinal: 7,
        node_type: NodeKind::Attention,
        index: 2,
        name: "x",
        kind,
        value,
        attention_probs: probs,
    }
}

#[test]
fn detector_examples() {
    let m = MarkerConfig::default();
    let e = detect(&record(AttrKind::SizeArray, vec![13, 1009, 64], false), &m)
        .unwrap()
        .unwrap();
    assert_eq!(e.spec, AxisSpec::Seq(1));
    assert_eq!(e.batch_axis, Some(0));

    let e = detect(
        &record(AttrKind::SavedTensor, vec![13, 4, 1009, 1009], true),
        &m,
    )
    .unwrap()
    .unwrap();
    assert_eq!(e.spec, AxisSpec::SeqSq(2, 3));

    let e = detect(&record(AttrKind::InputMetadata, vec![13117, 64], false), &m)
        .unwrap()
        .unwrap();
    assert_eq!(e.spec, AxisSpec::BszSeq(0));
    assert_eq!(e.batch_axis, None);

    assert!(
        detect(&record(AttrKind::SizeArray, vec![64, 32], false), &m)
            .unwrap()
            .is_none()
    );

    let e = detect(
        &record(AttrKind::ScalarCount, vec![13 * 1008 * 1009], false),
        &m,
    )
    .unwrap()
    .unwrap();
    assert_eq!(
        e.spec,
        AxisSpec::Count {
            seq_pow: 1,
            loss_pow: 1
        }
    );
}

#[test]
fn detector_rejects_ambiguous_extents() {
    let m = MarkerConfig::default();
    let err = detect(&record(AttrKind::SizeArray, vec![2 * 1009, 8], false), &m).unwrap_err();
    assert!(matches!(err, Error::Ambiguous { value: 2018, .. }), "{err}");
    let err = detect(
        &record(AttrKind::SavedTensor, vec![13, 1009, 1009], false),
        &m,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Ambiguous { .. }));
    let err = detect(&record(AttrKind::SavedTensor, vec![1009, 8], false), &m).unwrap_err();
    assert!(matches!(err, Error::Ambiguous { .. }));
}

#[test]
fn markers_reject_collisions() {
    let m = MarkerConfig::default();
    let model = ModelConfig {
        d_model: 1009 * 4,
        ..ModelConfig::tiny()
    };
    assert!(matches!(
        m.validate(&model),
        Err(Error::MarkerCollision { .. })
    ));
    let model = ModelConfig {
        d_ffn: 1009,
        ..ModelConfig::tiny()
    };
    let err = trace_with_markers(&model, &m).unwrap_err();
    assert!(
        matches!(err, Error::MarkerCollision { extent: 1009, .. }),
        "{err}"
    );
    assert!(err.to_string().contains("pick different primes"));
    let picked = m.pick_for(&model).unwrap();
    picked.validate(&model).unwrap();
    assert_ne!(picked, m);

    assert!(MarkerConfig { bsz: 12, seq: 1009 }
        .validate(&ModelConfig::tiny())
        .is_err());
    assert!(MarkerConfig { bsz: 13, seq: 13 }
        .validate(&ModelConfig::tiny())
        .is_err());
}

#[test]
fn marker_defaults_clear_tiny_model() {
    MarkerConfig::default()
        .validate(&ModelConfig::tiny())
        .unwrap();
    assert!(is_prime(13) && is_prime(1009) && !is_prime(1008));
}

#[test]
fn tiny_plan_covers_every_attention_matrix() {
    let plan = tiny_plan();
    assert!(!plan.is_empty());
    let sq: Vec<_> = plan
        .entries
        .iter()
        .filter(|e| matches!(e.spec, AxisSpec::SeqSq(..)) && e.kind == AttrKind::SavedTensor)
        .collect();
    assert_eq!(sq.len(), ModelConfig::tiny().n_layers);
    assert!(sq
        .iter()
        .all(|e| e.node_type == NodeKind::Attention && e.spec == AxisSpec::SeqSq(2, 3)));
    let mut ords: Vec<_> = plan
        .entries
        .iter()
        .map(|e| (e.ordinal, e.attribute))
        .collect();
    let n = ords.len();
    ords.dedup();
    assert_eq!(ords.len(), n, "entries are unique and ordered");
}

#[test]
fn tracing_is_deterministic_and_marker_independent() {
    let model = ModelConfig::tiny();
    let again = trace_with_markers(&model, &MarkerConfig::default()).unwrap();
    assert_eq!(again.to_bytes(), tiny_plan().to_bytes());
    let other = trace_with_markers(&model, &MarkerConfig { bsz: 7, seq: 101 }).unwrap();
    assert_eq!(other.entries, tiny_plan().entries);
    assert_eq!(other.structure_hash, tiny_plan().structure_hash);
}

#[test]
fn plan_bytes_round_trip() {
    let plan = tiny_plan();
    let bytes = plan.to_bytes();
    assert_eq!(bytes.len(), HEADER_LEN + RECORD_LEN * plan.len());
    let back = ReductionPlan::from_bytes(&bytes).unwrap();
    assert_eq!(&back, plan);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.plan");
    plan.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(&ReductionPlan::load(&path).unwrap(), plan);

    assert!(ReductionPlan::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(ReductionPlan::from_bytes(&bad).is_err());
}

#[test]
fn reduction_counts_and_shapes() {
    let mask = FilterMask::from_kept(4, vec![vec![1, 3], vec![0, 2]], 50.0).unwrap();
    let red = Reduction::from_mask(&mask);
    assert_eq!(red.seq, 5);
    assert_eq!(red.flat_seq(), vec![1, 3, 5, 7]);
    assert_eq!(red.flat_loss(), vec![1, 3, 4, 6]);
    assert_eq!(
        red.reduce_shape(&[2, 5, 8], AxisSpec::Seq(1)).unwrap(),
        vec![2, 2, 8]
    );
    assert_eq!(
        red.reduce_shape(&[10, 8], AxisSpec::BszSeq(0)).unwrap(),
        vec![4, 8]
    );
    assert_eq!(
        red.reduce_shape(&[2, 3, 5, 5], AxisSpec::SeqSq(2, 3))
            .unwrap(),
        vec![2, 3, 2, 2]
    );
    assert!(red.reduce_shape(&[2, 6, 8], AxisSpec::Seq(1)).is_err());
    let spec = AxisSpec::Count {
        seq_pow: 1,
        loss_pow: 1,
    };
    assert_eq!(red.reduce_count(2 * 5 * 4, spec).unwrap(), 2 * 2 * 2);
    assert!(red.reduce_count(7, spec).is_err());

    let t = Tensor::new(vec![2, 5], (0..10).map(|v| v as f64).collect()).unwrap();
    let r = red.reduce_tensor(&t, AxisSpec::Seq(1), Some(0)).unwrap();
    assert_eq!(r.data(), &[1.0, 3.0, 5.0, 7.0]);
    assert!(red.reduce_tensor(&t, AxisSpec::Seq(1), None).is_err());
}

fn attention_tape(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    seq: usize,
    hd: usize,
    upstream: &[f64],
) -> (Tape<f64>, crate::autograd::Var<f64>) {
    let shape = vec![1, 1, seq, hd];
    let mut tape = Tape::new();
    let qv = tape
        .param("q", Tensor::new(shape.clone(), q.to_vec()).unwrap())
        .unwrap();
    let kv = tape
        .param("k", Tensor::new(shape.clone(), k.to_vec()).unwrap())
        .unwrap();
    let vv = tape
        .param("v", Tensor::new(shape.clone(), v.to_vec()).unwrap())
        .unwrap();
    let out = tape.attention(&qv, &kv, &vv, true).unwrap();
    let g = tape.constant(Tensor::new(shape, upstream.to_vec()).unwrap());
    let weighted = tape.mul(&out, &g).unwrap();
    let loss = tape.sum(&weighted).unwrap();
    (tape, loss)
}

fn one_seq(seq: usize, keep: Vec<usize>) -> Reduction {
    Reduction {
        bsz: 1,
        seq,
        seq_keep: vec![keep.clone()],
        loss_keep: vec![keep],
    }
}

#[test]
fn two_token_value_gradient() {
    let (a, b) = (0.7, -1.3);
    let (mut tape, loss) = attention_tape(
        &[0.0; 4],
        &[0.0; 4],
        &[1.0, 2.0, 3.0, 4.0],
        2,
        2,
        &[a, b, 0.0, 0.0],
    );
    let red = one_seq(2, vec![0]);
    let att = tape
        .nodes()
        .iter()
        .position(|n| n.kind() == NodeKind::Attention)
        .unwrap();
    let probs = tape
        .node(att)
        .unwrap()
        .saved_real("softmax")
        .unwrap()
        .clone();
    assert_eq!(probs.data(), &[1.0, 0.0, 0.5, 0.5]);

    // reduced: kept×kept softmax against the kept upstream row
    let kept = red
        .reduce_tensor(&probs, AxisSpec::SeqSq(2, 3), Some(0))
        .unwrap();
    assert_eq!(kept.data(), &[1.0]);
    let g_kept = Tensor::new(vec![1, 2], vec![a, b]).unwrap();
    let gv_reduced = kept
        .reshape(vec![1, 1])
        .unwrap()
        .matmul_tn(&g_kept)
        .unwrap();
    assert_eq!(gv_reduced.data(), &[a, b]);

    mask_attention_with(&mut tape, &red).unwrap();
    let grads = tape.backward(&loss, &Tensor::scalar(1.0).unwrap()).unwrap();
    assert_eq!(grads.get("v").unwrap().data(), &[a, b, 0.0, 0.0]);
}

fn naive_masked_attention_grads(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    s: usize,
    d: usize,
    keep: &[bool],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut p = vec![0.0; s * s];
    for i in 0..s {
        let scores: Vec<f64> = (0..=i)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() * scale)
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = scores.iter().map(|x| (x - mx).exp()).sum();
        for j in 0..=i {
            p[i * s + j] = if keep[i] && keep[j] {
                (scores[j] - mx).exp() / z
            } else {
                0.0
            };
        }
    }
    let mut gv = vec![0.0; s * d];
    let mut gp = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            for c in 0..d {
                gv[j * d + c] += p[i * s + j] * g[i * d + c];
                gp[i * s + j] += g[i * d + c] * v[j * d + c];
            }
        }
    }
    let mut gs = vec![0.0; s * s];
    for i in 0..s {
        let dot: f64 = (0..s).map(|j| gp[i * s + j] * p[i * s + j]).sum();
        for j in 0..s {
            gs[i * s + j] = p[i * s + j] * (gp[i * s + j] - dot);
        }
    }
    let mut gq = vec![0.0; s * d];
    let mut gk = vec![0.0; s * d];
    for i in 0..s {
        for j in 0..s {
            for c in 0..d {
                gq[i * d + c] += gs[i * s + j] * k[j * d + c] * scale;
                gk[j * d + c] += gs[i * s + j] * q[i * d + c] * scale;
            }
        }
    }
    (gq, gk, gv)
}

#[test]
fn three_token_masked_attention_gradients() {
    let q = [0.3, -0.2, 0.5, 0.1, -0.4, 0.9];
    let k = [0.7, 0.2, -0.6, 0.4, 0.05, -0.3];
    let v = [1.0, -0.5, 0.25, 2.0, -1.5, 0.75];
    // dropped query row carries no upstream gradient
    let g = [0.4, -0.8, 1.1, 0.6, 0.0, 0.0];
    let keep = [true, true, false];
    let (want_q, want_k, want_v) = naive_masked_attention_grads(&q, &k, &v, &g, 3, 2, &keep);

    let (mut tape, loss) = attention_tape(&q, &k, &v, 3, 2, &g);
    mask_attention_with(&mut tape, &one_seq(3, vec![0, 1])).unwrap();
    let grads = tape.backward(&loss, &Tensor::scalar(1.0).unwrap()).unwrap();
    for (name, want) in [("q", want_q), ("k", want_k), ("v", want_v)] {
        let got = grads.get(name).unwrap().data();
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12, "{name}: {got:?} vs {want:?}");
        }
        assert_eq!(&got[4..], &[0.0, 0.0], "{name} row of the dropped token");
    }
}

#[test]
fn keep_all_rewrite_is_bit_identical() {
    let model = ModelConfig::tiny();
    let params = crate::model::Parameters::<f32>::init(&model, 3).unwrap();
    let ids = Tensor::new(vec![2, 10], (0..20).map(|i| (i * 7) % 64).collect()).unwrap();
    let mask = FilterMask::keep_all(2, 9).unwrap();
    let one = Tensor::scalar(1.0f32).unwrap();

    let mut plain = crate::train::record_step(&model, &params, &ids, Some(&mask)).unwrap();
    let want = plain.tape.backward(&plain.loss, &one).unwrap();
    let mut rewritten = crate::train::record_step(&model, &params, &ids, Some(&mask)).unwrap();
    backward_filter(&mut rewritten.tape, &mask, tiny_plan()).unwrap();
    let got = rewritten.tape.backward(&rewritten.loss, &one).unwrap();
    for (name, w) in &want.params {
        assert_eq!(got.get(name).unwrap().data(), w.data(), "{name}");
    }
}

#[test]
fn reduced_backward_matches_oracle() {
    let model = ModelConfig::tiny();
    for (bsz, seq, k, seed) in [(2, 16, 60.0, 1), (3, 11, 25.0, 2), (1, 21, 75.0, 3)] {
        let r = check_equivalence::<f64>(&model, tiny_plan(), bsz, seq, k, seed, None).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-10);
        let r = check_equivalence::<f32>(&model, tiny_plan(), bsz, seq, k, seed, None).unwrap();
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn unfused_attention_matches_oracle() {
    let model = ModelConfig {
        attention: crate::model::AttentionImpl::Unfused,
        ..ModelConfig::tiny()
    };
    let plan = trace_with_markers(&model, &MarkerConfig::default()).unwrap();
    assert_ne!(plan.structure_hash, tiny_plan().structure_hash);
    let r = check_equivalence::<f64>(&model, &plan, 2, 13, 50.0, 4, None).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn plan_hash_mismatch_is_rejected() {
    let deeper = ModelConfig {
        n_layers: 3,
        ..ModelConfig::tiny()
    };
    let params = crate::model::Parameters::<f64>::init(&deeper, 0).unwrap();
    let ids = Tensor::new(vec![1, 6], vec![1, 2, 3, 4, 5, 6]).unwrap();
    let mask = FilterMask::from_kept(5, vec![vec![0, 2, 4]], 60.0).unwrap();
    let mut step = crate::train::record_step(&deeper, &params, &ids, Some(&mask)).unwrap();
    let err = backward_filter(&mut step.tape, &mask, tiny_plan()).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }), "{err}");
}

#[test]
fn verify_plan_reports() {
    let model = ModelConfig::tiny();
    let ok = verify_plan(tiny_plan(), &model, 5, None).unwrap();
    assert!(ok.passed, "{:?}", ok.failures);
    assert_eq!(ok.first_difference, None);

    let deeper = ModelConfig {
        n_layers: 3,
        ..model.clone()
    };
    let bad = verify_plan(tiny_plan(), &deeper, 5, None).unwrap();
    assert!(!bad.passed && !bad.hash_matches);
}

#[test]
fn faults_are_localized_to_their_node() {
    let model = ModelConfig::tiny();
    let plan = tiny_plan();
    let att = plan
        .entries
        .iter()
        .find(|e| e.node_type == NodeKind::Attention)
        .unwrap()
        .ordinal as usize;
    let r = check_equivalence::<f64>(
        &model,
        plan,
        2,
        12,
        50.0,
        9,
        Some(Fault::PerturbSaved { ordinal: att }),
    )
    .unwrap();
    assert!(!r.passed);
    assert_eq!(r.divergence.as_ref().unwrap().ordinal, att, "{r:?}");

    for index in [0, plan.len() / 3, plan.len() / 2, plan.len() - 1] {
        let owner = plan.entries[index].ordinal as usize;
        let r = check_equivalence::<f64>(
            &model,
            plan,
            2,
            12,
            50.0,
            9,
            Some(Fault::DropEntry { index }),
        )
        .unwrap();
        assert!(!r.passed, "dropping entry {index} went unnoticed");
        assert_eq!(
            r.divergence.as_ref().map(|d| d.ordinal),
            Some(owner),
            "entry {index}: {r:?}"
        );
    }
}
