use super::optim::{adam, sgd};
use super::*;
use crate::autograd::Tape;

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        d_model: 8,
        n_heads: 2,
        d_ffn: 12,
        vocab_size: 11,
        max_seq: 16,
        ..ModelConfig::tiny()
    }
}

fn ids(bsz: usize, seq: usize, vocab: usize, salt: usize) -> Tensor<usize> {
    Tensor::new(
        vec![bsz, seq],
        (0..bsz * seq)
            .map(|i| (i * 7 + salt * 3 + 1) % vocab)
            .collect(),
    )
    .unwrap()
}

fn logits_of(cfg: &ModelConfig, p: &Parameters<f64>, ids: &Tensor<usize>) -> Tensor<f64> {
    let mut tape = Tape::new();
    forward(cfg, p, ids, &mut tape).unwrap().value().clone()
}

#[test]
fn config_validation() {
    let mut c = tiny(1);
    c.n_heads = 3;
    assert!(c.validate().is_err());
    c.n_heads = 2;
    c.d_ffn = 0;
    assert!(c.validate().is_err());
    assert_eq!(ModelConfig::bench().head_dim(), 64);
}

#[test]
fn forward_rejects_bad_input() {
    let cfg = tiny(1);
    let p = Parameters::<f64>::init(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let bad = Tensor::new(vec![1, 2], vec![0, 11]).unwrap();
    assert!(matches!(
        forward(&cfg, &p, &bad, &mut tape),
        Err(Error::TokenOutOfRange { id: 11, vocab: 11 })
    ));
    let long = ids(1, 17, 11, 0);
    assert!(matches!(
        forward(&cfg, &p, &long, &mut tape),
        Err(Error::SeqTooLong { .. })
    ));
}

#[test]
fn causal_logits_ignore_future_tokens() {
    let cfg = tiny(2);
    let p = Parameters::<f64>::init(&cfg, 1).unwrap();
    let a = ids(2, 6, 11, 0);
    let mut changed = a.data().to_vec();
    for b in 0..2 {
        for t in 4..6 {
            changed[b * 6 + t] = (changed[b * 6 + t] + 5) % 11;
        }
    }
    let b = Tensor::new(vec![2, 6], changed).unwrap();
    let (la, lb) = (logits_of(&cfg, &p, &a), logits_of(&cfg, &p, &b));
    for bi in 0..2 {
        for t in 0..6 {
            let off = (bi * 6 + t) * 11;
            let same = la.data()[off..off + 11] == lb.data()[off..off + 11];
            assert_eq!(same, t < 4, "batch {bi} position {t}");
        }
    }
}

#[test]
fn single_token_attention_returns_value() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.3, -1.0]).unwrap());
    let k = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![2.0, 0.5]).unwrap());
    let v = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![4.0, -7.0]).unwrap());
    let o = tape.attention(&q, &k, &v, true).unwrap();
    assert_eq!(o.value().data(), &[4.0, -7.0]);
}

#[test]
fn zero_query_attention_averages_prefix() {
    let mut tape = Tape::<f64>::new();
    let s = 4;
    let q = tape.constant(Tensor::zeros(vec![1, 1, s, 2]).unwrap());
    let k =
        tape.constant(Tensor::new(vec![1, 1, s, 2], (0..8).map(|i| i as f64).collect()).unwrap());
    let vdata: Vec<f64> = (0..8).map(|i| (i * i) as f64 - 3.0).collect();
    let v = tape.constant(Tensor::new(vec![1, 1, s, 2], vdata.clone()).unwrap());
    let o = tape.attention(&q, &k, &v, true).unwrap();
    for t in 0..s {
        for c in 0..2 {
            let mean = (0..=t).map(|r| vdata[r * 2 + c]).sum::<f64>() / (t + 1) as f64;
            assert!((o.value().data()[t * 2 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn saved_softmax_is_causal_and_normalized() {
    let cfg = tiny(1);
    let p = Parameters::<f64>::init(&cfg, 2).unwrap();
    let mut tape = Tape::new();
    forward(&cfg, &p, &ids(2, 5, 11, 1), &mut tape).unwrap();
    let node = tape
        .nodes()
        .iter()
        .find(|n| n.kind() == crate::autograd::NodeKind::Attention)
        .unwrap();
    let probs = node.saved_real("softmax").unwrap();
    assert_eq!(probs.shape(), &[2, 2, 5, 5]);
    for (r, row) in probs.data().chunks(5).enumerate() {
        let i = r % 5;
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[i + 1..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn nll_special_cases() {
    let mut tape = Tape::<f64>::new();
    let v = 5;
    let ids = Tensor::new(vec![1, 3], vec![1, 4, 2]).unwrap();
    let uniform = tape.constant(Tensor::zeros(vec![1, 3, v]).unwrap());
    let (loss, nll) = causal_lm_loss(&mut tape, &uniform, &ids).unwrap();
    assert_eq!(nll.shape(), &[1, 2]);
    for &x in nll.value().data() {
        assert!((x - (v as f64).ln()).abs() < 1e-12);
    }
    assert!((loss.value().item() - (v as f64).ln()).abs() < 1e-12);

    let mut peaked = vec![0.0; 3 * v];
    peaked[4] = 1e4;
    peaked[v + 2] = 1e4;
    let peaked = tape.constant(Tensor::new(vec![1, 3, v], peaked).unwrap());
    let nll = per_token_nll(&mut tape, &peaked, &ids).unwrap();
    assert!(nll.value().data().iter().all(|&x| x == 0.0));
}

#[test]
fn model_gradients_match_finite_differences() {
    for attention in [AttentionImpl::Fused, AttentionImpl::Unfused] {
        let cfg = ModelConfig {
            attention,
            ..tiny(1)
        };
        let p = Parameters::<f64>::init(&cfg, 3).unwrap();
        let batch = ids(2, 4, 11, 2);
        let loss_of = |p: &Parameters<f64>| {
            let mut tape = Tape::new();
            let logits = forward(&cfg, p, &batch, &mut tape).unwrap();
            causal_lm_loss(&mut tape, &logits, &batch)
                .unwrap()
                .0
                .value()
                .item()
        };
        let mut tape = Tape::new();
        let logits = forward(&cfg, &p, &batch, &mut tape).unwrap();
        let (loss, _) = causal_lm_loss(&mut tape, &logits, &batch).unwrap();
        let grads = tape.backward(&loss, &Tensor::scalar(1.0).unwrap()).unwrap();
        assert_eq!(grads.params.len(), p.len());
        let h = 1e-5;
        for (name, t) in p.iter() {
            let g = grads.get(name).unwrap();
            // probe a few coordinates per tensor
            for i in (0..t.numel()).step_by((t.numel() / 5).max(1)) {
                let bump = |d: f64| {
                    let mut q = p.clone();
                    let mut data = t.data().to_vec();
                    data[i] += d;
                    q.set(name, Tensor::new(t.shape().to_vec(), data).unwrap())
                        .unwrap();
                    loss_of(&q)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = g.data()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    err < 1e-4,
                    "{attention:?} {name}[{i}]: fd {fd} analytic {an}"
                );
            }
        }
    }
}

#[test]
fn forward_is_replayable() {
    let cfg = tiny(2);
    let p = Parameters::<f32>::init(&cfg, 4).unwrap();
    let batch = ids(2, 5, 11, 3);
    let mut a = Tape::new();
    let mut b = Tape::new();
    let la = forward(&cfg, &p, &batch, &mut a).unwrap();
    let lb = forward(&cfg, &p, &batch, &mut b).unwrap();
    assert_eq!(la.value(), lb.value());
    assert_eq!(a.structure_hash(), b.structure_hash());
    assert_eq!(a.enumerate_attributes(), b.enumerate_attributes());
}

#[test]
fn optimizer_laws() {
    let p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let g = Tensor::new(vec![3], vec![0.25, 1.0, -3.0]).unwrap();
    assert_eq!(sgd(&p, &g, 1.0).unwrap().data(), &[0.75, -3.0, 3.5]);
    assert_eq!(sgd(&p, &Tensor::zeros(vec![3]).unwrap(), 0.1).unwrap(), p);

    // step one: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    let cfg = OptimConfig::default();
    let z = Tensor::<f64>::zeros(vec![3]).unwrap();
    let (np, m, v) = adam(&p, &g, &z, &z, 0.01, &cfg, 1).unwrap();
    for i in 0..3 {
        let gi = g.data()[i];
        assert!((m.data()[i] - 0.1 * gi).abs() < 1e-15);
        assert!((v.data()[i] - 0.001 * gi * gi).abs() < 1e-15);
        let expect = p.data()[i] - 0.01 * gi / (gi.abs() + cfg.eps);
        assert!((np.data()[i] - expect).abs() < 1e-12);
    }

    let cos = OptimConfig {
        total_steps: 10,
        ..OptimConfig::default()
    };
    assert_eq!(cos.lr_at(0), cos.lr);
    assert!((cos.lr_at(10) - cos.lr * cos.min_lr_ratio).abs() < 1e-15);
    assert!(cos.lr_at(3) > cos.lr_at(7));
}

#[test]
fn zero_gradients_leave_sgd_parameters_unchanged() {
    let cfg = tiny(1);
    let mut p = Parameters::<f64>::init(&cfg, 5).unwrap();
    let before = p.clone();
    let zeros = p
        .iter()
        .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec()).unwrap()))
        .collect();
    let mut opt = Optimizer::new(OptimConfig::sgd(0.5));
    opt.update(&mut p, &zeros).unwrap();
    assert_eq!(p, before);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(1);
    let mut params = Parameters::<f32>::init(&cfg, 6).unwrap();
    let mut opt = Optimizer::new(OptimConfig::default());
    let grads = params
        .iter()
        .map(|(n, t)| (n.clone(), t.scale(0.5).unwrap()))
        .collect();
    opt.update(&mut params, &grads).unwrap();
    let ckpt = Checkpoint {
        config: cfg,
        params,
        optimizer: opt,
        step: 1,
    };
    save_checkpoint(dir.path(), &ckpt).unwrap();
    let back: Checkpoint<f32> = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, ckpt);
    assert!(load_checkpoint::<f64>(dir.path()).is_err());
}

#[test]
fn corpus_loading_and_batches() {
    let dir = tempfile::tempdir().unwrap();
    let ids_path = dir.path().join("ids.txt");
    std::fs::write(&ids_path, "1 2 3\n4 5\n\n6 7 8 9\n").unwrap();
    let c = TokenCorpus::load(&ids_path).unwrap();
    assert_eq!(c.ids, (1..=9).collect::<Vec<_>>());
    assert_eq!(c.vocab_size, 10);
    assert_eq!(c.num_windows(4), 2);
    assert_eq!(c.batch(&[1], 4).unwrap().data(), &[5, 6, 7, 8]);
    assert_eq!(c.windows_for_step(3, 1, 4).unwrap(), vec![1]);

    let raw = dir.path().join("raw.txt");
    std::fs::write(&raw, "hi there").unwrap();
    let c = TokenCorpus::load(&raw).unwrap();
    assert_eq!(c.vocab_size, 256);
    assert_eq!(c.ids[0], b'h' as usize);

    let s = synthetic_corpus(1000, 16, 1).unwrap();
    assert_eq!(s, synthetic_corpus(1000, 16, 1).unwrap());
    assert!(s.ids.iter().all(|&i| i < 16));
}
