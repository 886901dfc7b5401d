use super::*;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Central finite differences of a scalar function of named parameters,
/// compared against the tape's gradients.
fn gradcheck(
    params: &[(&str, Tensor<f64>)],
    build: impl Fn(&mut Tape<f64>, &[Var<f64>]) -> Var<f64>,
) {
    let run = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<_> = params
            .iter()
            .zip(vals)
            .map(|((n, _), v)| tape.param(n, v.clone()).unwrap())
            .collect();
        build(&mut tape, &vars).value().item()
    };
    let base: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let vars: Vec<_> = params
        .iter()
        .map(|(n, t)| tape.param(n, t.clone()).unwrap())
        .collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(&root, &Tensor::scalar(1.0).unwrap()).unwrap();
    let h = 1e-5;
    for (pi, (name, t)) in params.iter().enumerate() {
        let g = grads.get(name).unwrap();
        assert_eq!(g.shape(), t.shape(), "{name}");
        for i in 0..t.numel() {
            let bump = |d: f64| {
                let mut vals = base.clone();
                let mut data = vals[pi].data().to_vec();
                data[i] += d;
                vals[pi] = Tensor::new(t.shape().to_vec(), data).unwrap();
                run(&vals)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = g.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-6, "{name}[{i}]: fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn gemm_node_attributes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param("x", Tensor::zeros(vec![3, 4]).unwrap()).unwrap();
    let w = tape.param("w", Tensor::zeros(vec![4, 2]).unwrap()).unwrap();
    tape.mm(&x, &w).unwrap();
    let attrs = tape.enumerate_attributes();
    let kinds: Vec<_> = attrs.iter().map(|a| (a.name, a.kind)).collect();
    assert_eq!(
        kinds,
        vec![
            ("self", AttrKind::SavedTensor),
            ("mat2", AttrKind::SavedTensor),
            ("self_sizes", AttrKind::SizeArray),
            ("mat2_sizes", AttrKind::SizeArray),
            (INPUT_METADATA, AttrKind::InputMetadata),
        ]
    );
    assert_eq!(attrs[4].value, vec![3, 2]);
}

#[test]
fn attention_node_saves_qkv_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f64>::new();
    let q = tape
        .param("q", rand_tensor(&mut rng, &[1, 2, 3, 4]))
        .unwrap();
    let k = tape
        .param("k", rand_tensor(&mut rng, &[1, 2, 3, 4]))
        .unwrap();
    let v = tape
        .param("v", rand_tensor(&mut rng, &[1, 2, 3, 4]))
        .unwrap();
    tape.attention(&q, &k, &v, true).unwrap();
    let saved: Vec<_> = tape
        .enumerate_attributes()
        .into_iter()
        .filter(|a| a.kind == AttrKind::SavedTensor)
        .map(|a| (a.name, a.attention_probs, a.value))
        .collect();
    assert_eq!(saved.len(), 4);
    assert_eq!(saved[3], ("softmax", true, vec![1, 2, 3, 3]));
}

#[test]
fn single_gemm_chain_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xv = rand_tensor(&mut rng, &[5, 3]);
    let wv = rand_tensor(&mut rng, &[3, 4]);
    let seed = rand_tensor(&mut rng, &[5, 4]);
    let mut tape = Tape::new();
    let x = tape.param("x", xv.clone()).unwrap();
    let w = tape.param("w", wv.clone()).unwrap();
    let y = tape.mm(&x, &w).unwrap();
    let g = tape.backward(&y, &seed).unwrap();
    assert_eq!(
        g.get("w").unwrap(),
        &xv.transpose(0, 1).unwrap().matmul(&seed).unwrap()
    );
    assert_eq!(
        g.get("x").unwrap(),
        &seed.matmul(&wv.transpose(0, 1).unwrap()).unwrap()
    );
    assert_eq!(g.total_macs().linear, 2 * 5 * 3 * 4);
}

#[test]
fn zero_seed_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.param("x", rand_tensor(&mut rng, &[4, 3])).unwrap();
    let w = tape.param("w", rand_tensor(&mut rng, &[3, 3])).unwrap();
    let h = tape.mm(&x, &w).unwrap();
    let h = tape.silu(&h).unwrap();
    let y = tape.mm(&h, &w).unwrap();
    let g = tape
        .backward(&y, &Tensor::zeros(vec![4, 3]).unwrap())
        .unwrap();
    for t in g.params.values() {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

fn mlp(tape: &mut Tape<f64>, p: &[Var<f64>], fused: bool) -> Var<f64> {
    let h = tape.mm(&p[0], &p[1]).unwrap();
    let h = if fused {
        let b = tape.add(&h, &p[2]).unwrap();
        tape.silu(&b).unwrap()
    } else {
        let b = tape.add(&h, &p[2]).unwrap();
        let b = tape.scale(&b, 1.0).unwrap();
        tape.silu(&b).unwrap()
    };
    let y = tape.mm(&h, &p[3]).unwrap();
    tape.mean(&y).unwrap()
}

fn mlp_params() -> Vec<(&'static str, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    vec![
        ("x", rand_tensor(&mut rng, &[3, 4])),
        ("w1", rand_tensor(&mut rng, &[4, 5])),
        ("b1", rand_tensor(&mut rng, &[5])),
        ("w2", rand_tensor(&mut rng, &[5, 2])),
    ]
}

fn record(params: &[(&str, Tensor<f64>)], fused: bool) -> Tape<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = params
        .iter()
        .map(|(n, t)| tape.param(n, t.clone()).unwrap())
        .collect();
    mlp(&mut tape, &vars, fused);
    tape
}

#[test]
fn structure_hash_is_replayable_and_sensitive() {
    let p = mlp_params();
    let a = record(&p, true);
    let b = record(&p, true);
    assert_eq!(a.structure_hash(), b.structure_hash());
    assert_eq!(a.enumerate_attributes(), b.enumerate_attributes());
    assert_ne!(a.structure_hash(), record(&p, false).structure_hash());

    // shapes do not enter the hash
    let mut small = p.clone();
    small[0].1 = Tensor::zeros(vec![7, 4]).unwrap();
    assert_eq!(a.structure_hash(), record(&small, true).structure_hash());
}

#[test]
fn mlp_matches_finite_differences() {
    gradcheck(&mlp_params(), |t, p| mlp(t, p, true));
}

#[test]
fn ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 4, 3]);
    let w = rand_tensor(&mut rng, &[4]);
    let weights = rand_tensor(&mut rng, &[2, 3, 3]);
    let wt = Tensor::new(vec![2, 3, 3], weights.data().to_vec()).unwrap();
    gradcheck(&[("a", a.clone()), ("b", b.clone())], |t, p| {
        let c = t.bmm(&p[0], &p[1]).unwrap();
        let c = t.causal_mask_fill(&c).unwrap();
        let s = t.softmax(&c).unwrap();
        let k = t.constant(wt.clone());
        let m = t.mul(&s, &k).unwrap();
        t.sum(&m).unwrap()
    });
    gradcheck(&[("a", a.clone()), ("w", w)], |t, p| {
        let n = t.rms_norm(&p[0], &p[1], 1e-6).unwrap();
        let n = t.transpose(&n, 0, 2).unwrap();
        let n = t.reshape(&n, &[8, 3]).unwrap();
        let n = t.index_select(&n, 0, &[1, 4, 6]).unwrap();
        let n = t.slice(&n, 1, 1, 2).unwrap();
        let m = t.mul(&n, &n).unwrap();
        t.sum(&m).unwrap()
    });
    let target = Tensor::new(vec![2, 2], vec![0, 3, 2, 1]).unwrap();
    let mask = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    let ids = Tensor::new(vec![2, 3], vec![0, 2, 2, 1, 0, 4]).unwrap();
    let table = rand_tensor(&mut rng, &[5, 4]);
    gradcheck(&[("table", table)], |t, p| {
        let e = t.embedding(&p[0], &ids).unwrap();
        let e = t.slice(&e, 1, 0, 2).unwrap();
        let nll = t.cross_entropy(&e, &target).unwrap();
        t.masked_mean(&nll, &mask, 3).unwrap()
    });
}

#[test]
fn fused_attention_matches_unfused_and_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = vec![
        ("q", rand_tensor(&mut rng, &[2, 2, 4, 3])),
        ("k", rand_tensor(&mut rng, &[2, 2, 4, 3])),
        ("v", rand_tensor(&mut rng, &[2, 2, 4, 3])),
    ];
    let weights = rand_tensor(&mut rng, &[2, 2, 4, 3]);
    let fused = |t: &mut Tape<f64>, p: &[Var<f64>]| {
        let o = t.attention(&p[0], &p[1], &p[2], true).unwrap();
        let w = t.constant(weights.clone());
        let o = t.mul(&o, &w).unwrap();
        t.sum(&o).unwrap()
    };
    let unfused = |t: &mut Tape<f64>, p: &[Var<f64>]| {
        let kt = t.transpose(&p[1], 2, 3).unwrap();
        let a = t.bmm(&p[0], &kt).unwrap();
        let a = t.scale(&a, 1.0 / 3f64.sqrt()).unwrap();
        let a = t.causal_mask_fill(&a).unwrap();
        let s = t.softmax_probs(&a).unwrap();
        let o = t.bmm_probs(&s, &p[2]).unwrap();
        let w = t.constant(weights.clone());
        let o = t.mul(&o, &w).unwrap();
        t.sum(&o).unwrap()
    };
    gradcheck(&params, fused);
    let grads = |f: &dyn Fn(&mut Tape<f64>, &[Var<f64>]) -> Var<f64>| {
        let mut tape = Tape::new();
        let vars: Vec<_> = params
            .iter()
            .map(|(n, v)| tape.param(n, v.clone()).unwrap())
            .collect();
        let r = f(&mut tape, &vars);
        let loss = r.value().item();
        (
            loss,
            tape.backward(&r, &Tensor::scalar(1.0).unwrap()).unwrap(),
        )
    };
    let (la, ga) = grads(&fused);
    let (lb, gb) = grads(&unfused);
    assert!((la - lb).abs() < 1e-12);
    for (n, t) in &ga.params {
        let diff = t.sub(gb.get(n).unwrap()).unwrap().max_abs();
        assert!(diff < 1e-12, "{n}: {diff}");
    }
    assert_eq!(
        ga.total_macs().attention_score,
        gb.total_macs().attention_score
    );
}

#[test]
fn consumed_tape_rejects_reuse() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param("x", Tensor::scalar(2.0).unwrap()).unwrap();
    let y = tape.scale(&x, 3.0).unwrap();
    let g = tape.backward(&y, &Tensor::scalar(1.0).unwrap()).unwrap();
    assert_eq!(g.get("x").unwrap().item(), 3.0);
    assert!(matches!(
        tape.backward(&y, &Tensor::scalar(1.0).unwrap()),
        Err(GraphError::TapeConsumed)
    ));
    assert!(matches!(tape.scale(&x, 1.0), Err(GraphError::TapeConsumed)));
}

#[test]
fn shared_parameter_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape
        .param("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    let y = tape.mul(&x, &x).unwrap();
    let s = tape.sum(&y).unwrap();
    let g = tape.backward(&s, &Tensor::scalar(1.0).unwrap()).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn mutation_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let build = || {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .param("x", rand_tensor(&mut ChaCha8Rng::seed_from_u64(8), &[4, 3]))
            .unwrap();
        let w = tape
            .param("w", rand_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[3, 2]))
            .unwrap();
        let y = tape.mm(&x, &w).unwrap();
        (tape, y)
    };
    let seed = rand_tensor(&mut rng, &[4, 2]);

    // unknown attribute / ordinal, rank change
    let (mut tape, _) = build();
    assert!(matches!(
        tape.mutate_attribute(0, "nope", AttrValue::Count(1)),
        Err(GraphError::UnknownAttribute { .. })
    ));
    assert!(matches!(
        tape.mutate_attribute(5, "self", AttrValue::Count(1)),
        Err(GraphError::UnknownOrdinal(5))
    ));
    let flat = SavedValue::Real(Tensor::zeros(vec![12]).unwrap());
    assert!(matches!(
        tape.mutate_attribute(0, "self", AttrValue::Saved(flat)),
        Err(GraphError::RankChange { .. })
    ));

    // no-op mutation is bit-identical
    let (mut plain, y) = build();
    let expect = plain.backward(&y, &seed).unwrap();
    let (mut tape, y) = build();
    let cur = tape.node(0).unwrap().saved_real("self").unwrap().clone();
    tape.mutate_attribute(0, "self", AttrValue::Saved(SavedValue::Real(cur)))
        .unwrap();
    tape.mutate_attribute(0, "self_sizes", AttrValue::Sizes(vec![4, 3]))
        .unwrap();
    let got = tape.backward(&y, &seed).unwrap();
    assert_eq!(got.params, expect.params);

    // coherent shrink succeeds
    let (mut tape, y) = build();
    let small = tape
        .node(0)
        .unwrap()
        .saved_real("self")
        .unwrap()
        .gather_axis(0, &[1, 3])
        .unwrap();
    tape.mutate_attribute(0, "self", AttrValue::Saved(SavedValue::Real(small.clone())))
        .unwrap();
    tape.mutate_attribute(0, "self_sizes", AttrValue::Sizes(vec![2, 3]))
        .unwrap();
    tape.mutate_attribute(0, INPUT_METADATA, AttrValue::Metadata(vec![2, 2]))
        .unwrap();
    let small_seed = seed.gather_axis(0, &[1, 3]).unwrap();
    let g = tape.backward(&y, &small_seed).unwrap();
    assert_eq!(g.get("w").unwrap(), &small.matmul_tn(&small_seed).unwrap());

    // shrink without metadata: caught at the node
    let (mut tape, y) = build();
    tape.mutate_attribute(0, "self", AttrValue::Saved(SavedValue::Real(small)))
        .unwrap();
    tape.mutate_attribute(0, "self_sizes", AttrValue::Sizes(vec![2, 3]))
        .unwrap();
    match tape.backward(&y, &small_seed) {
        Err(GraphError::MetadataMismatch {
            ordinal,
            expected,
            actual,
            ..
        }) => {
            assert_eq!(ordinal, 0);
            assert_eq!(expected, vec![4, 2]);
            assert_eq!(actual, vec![2, 2]);
        }
        other => panic!("expected metadata mismatch, got {other:?}"),
    }

    // saved tensor inconsistent with its size array
    let (mut tape, y) = build();
    let z = SavedValue::Real(Tensor::zeros(vec![2, 3]).unwrap());
    tape.mutate_attribute(0, "self", AttrValue::Saved(z))
        .unwrap();
    assert!(matches!(
        tape.backward(&y, &seed),
        Err(GraphError::SavedSizeMismatch { ordinal: 0, .. })
    ));
}

#[test]
fn registry_lookup_by_name() {
    let reg = RuleRegistry::<f32>::standard();
    assert_eq!(reg.names().len(), NodeKind::ALL.len());
    assert!(reg.by_name("attention").is_some());
    let tape = Tape::<f32>::with_rules(std::sync::Arc::new(RuleRegistry::empty()));
    let mut tape = tape;
    let x = tape.param("x", Tensor::scalar(1.0).unwrap()).unwrap();
    assert!(matches!(
        tape.scale(&x, 2.0),
        Err(GraphError::MissingRule(NodeKind::Scale))
    ));
}
