use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Tape;
use crate::model::{per_token_nll, TokenCorpus};

fn t2(rows: usize, data: Vec<f64>) -> Tensor<f64> {
    let n = data.len() / rows;
    Tensor::new(vec![rows, n], data).unwrap()
}

#[test]
fn excess_loss_examples() {
    let a = t2(1, vec![2.0, 3.0]);
    let b = t2(1, vec![1.0, 5.0]);
    assert_eq!(excess_loss(&a, &b).unwrap().data(), &[1.0, -2.0]);
    assert!(excess_loss(&a, &a)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(excess_loss(&a, &t2(2, vec![1.0; 2])).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f64> = (0..60).map(|_| rng.gen()).collect();
    let y: Vec<f64> = (0..60).map(|_| rng.gen()).collect();
    let e = excess_loss(&t2(3, x.clone()), &t2(3, y.clone())).unwrap();
    for i in 0..60 {
        assert_eq!(e.data()[i], x[i] - y[i]);
    }
}

#[test]
fn topk_examples() {
    let m = select_topk(&t2(1, vec![0.9, 0.1, -0.2, 0.5]), 50.0).unwrap();
    assert_eq!(m.kept(), &[vec![0, 3]]);
    let m = select_topk(&t2(1, vec![0.9, 0.1, -0.2, 0.5]), 100.0).unwrap();
    assert!(m.keeps_all());
    // ties keep the lower index
    let m = select_topk(&t2(1, vec![1.0, 2.0, 1.0, 1.0]), 50.0).unwrap();
    assert_eq!(m.kept(), &[vec![0, 1]]);
    assert!(select_topk(&t2(1, vec![1.0]), 0.0).is_err());
    assert!(select_topk(&t2(1, vec![1.0]), 100.5).is_err());
}

#[test]
fn topk_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for k in [10.0, 40.0, 60.0] {
        let m = select_topk(&t2(1, v.clone()), k).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let want = (200.0 * k / 100.0) as usize;
        let threshold = sorted[want - 1];
        let oracle: Vec<usize> = (0..200).filter(|&i| v[i] >= threshold).collect();
        assert_eq!(m.kept()[0], oracle, "k={k}");
    }
}

#[test]
fn kept_count_rounding() {
    assert_eq!(kept_count(200, 10.0).unwrap(), 20);
    assert_eq!(kept_count(1008, 70.0).unwrap(), 706);
    assert_eq!(kept_count(3, 10.0).unwrap(), 1);
    assert_eq!(kept_count(7, 100.0).unwrap(), 7);
}

#[test]
fn mask_invariants() {
    assert!(FilterMask::from_kept(4, vec![vec![0, 1], vec![2]], 50.0).is_err());
    assert!(FilterMask::from_kept(4, vec![vec![1, 1]], 50.0).is_err());
    assert!(FilterMask::from_kept(4, vec![vec![1, 4]], 50.0).is_err());
    let m = FilterMask::from_kept(4, vec![vec![1, 3], vec![0, 2]], 50.0).unwrap();
    assert_eq!(
        m.keep(),
        vec![false, true, false, true, true, false, true, false]
    );
    assert_eq!(m.total_kept(), 4);
    assert!(m.is_kept(1, 2) && !m.is_kept(1, 3));
}

#[test]
fn filtered_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let nll = tape.param("nll", t2(1, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
    let mask = FilterMask::from_kept(4, vec![vec![0, 3]], 50.0).unwrap();
    let loss = filtered_loss(&mut tape, &nll, &mask).unwrap();
    assert_eq!(loss.value().item(), 2.5);
    let g = tape.backward(&loss, &Tensor::scalar(1.0).unwrap()).unwrap();
    assert_eq!(g.get("nll").unwrap().data(), &[0.5, 0.0, 0.0, 0.5]);

    let mut tape = Tape::<f64>::new();
    let mask = FilterMask::from_kept(4, vec![], 50.0);
    assert!(mask.is_err());
    let nll = tape.constant(t2(1, vec![1.0, 2.0]));
    assert!(filtered_loss(&mut tape, &nll, &FilterMask::keep_all(1, 3).unwrap()).is_err());
}

#[test]
fn dropped_logit_rows_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, s, v) = (2, 5, 7);
    let logits: Vec<f64> = (0..b * s * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let ids = Tensor::new(vec![b, s], (0..b * s).map(|i| i % v).collect()).unwrap();
    let mut tape = Tape::new();
    let lv = tape
        .param("logits", Tensor::new(vec![b, s, v], logits).unwrap())
        .unwrap();
    let nll = per_token_nll(&mut tape, &lv, &ids).unwrap();
    let mask = FilterMask::from_kept(s - 1, vec![vec![0, 2], vec![1, 3]], 50.0).unwrap();
    let loss = filtered_loss(&mut tape, &nll, &mask).unwrap();
    let g = tape.backward(&loss, &Tensor::scalar(1.0).unwrap()).unwrap();
    let g = g.get("logits").unwrap();
    for bi in 0..b {
        for i in 0..s {
            let row = &g.data()[(bi * s + i) * v..(bi * s + i + 1) * v];
            let nonzero = row.iter().any(|&x| x != 0.0);
            assert_eq!(nonzero, i < s - 1 && mask.is_kept(bi, i), "({bi}, {i})");
        }
    }
}

#[test]
fn ngram_examples() {
    let toks = [0, 1, 0, 1];
    let m = NgramModel::train(&toks, 2, 2, 0.0).unwrap();
    assert_eq!(m.prob(&[0], 1), 1.0);
    let ids = Tensor::new(vec![1, 4], toks.to_vec()).unwrap();
    let nll = m.score(&ids).unwrap();
    assert_eq!(nll.data()[0], 0.0);

    // context 2 never occurs, so backs off to unigram frequency
    let m = NgramModel::train(&[0, 1, 0, 1, 2], 3, 2, 0.0).unwrap();
    assert_eq!(m.prob(&[2], 0), 2.0 / 5.0);
}

#[test]
fn ngram_matches_count_table_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vocab = 5;
    let toks: Vec<usize> = (0..50).map(|_| rng.gen_range(0..vocab)).collect();
    let alpha = 0.01;
    let m = NgramModel::train(&toks, vocab, 2, alpha).unwrap();
    let mut pair: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ctx: HashMap<usize, f64> = HashMap::new();
    for w in toks.windows(2) {
        *pair.entry((w[0], w[1])).or_default() += 1.0;
        *ctx.entry(w[0]).or_default() += 1.0;
    }
    let probe: Vec<usize> = (0..12).map(|_| rng.gen_range(0..vocab)).collect();
    let nll = m
        .score(&Tensor::new(vec![1, 12], probe.clone()).unwrap())
        .unwrap();
    for i in 1..12 {
        let (a, b) = (probe[i - 1], probe[i]);
        let p = match ctx.get(&a) {
            Some(&c) => {
                (pair.get(&(a, b)).copied().unwrap_or(0.0) + alpha) / (c + alpha * vocab as f64)
            }
            None => {
                let uni = toks.iter().filter(|&&t| t == b).count() as f64;
                (uni + alpha) / (50.0 + alpha * vocab as f64)
            }
        };
        assert!((nll.data()[i - 1] + p.ln()).abs() < 1e-12);
    }
}

#[test]
fn similarity_examples() {
    let a = FilterMask::from_kept(4, vec![vec![0, 1]], 50.0).unwrap();
    let b = FilterMask::from_kept(4, vec![vec![2, 3]], 50.0).unwrap();
    let s = [1.0, 2.0, 3.0, 4.0];
    let r = mask_similarity(&a, &a, &s, &s).unwrap();
    assert_eq!(r.common_ratio, 1.0);
    assert!((r.pearson.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(mask_similarity(&a, &b, &s, &s).unwrap().common_ratio, 0.0);
    assert_eq!(
        mask_similarity(&a, &b, &[1.0; 4], &s).unwrap().pearson,
        None
    );
    let chance = chance_common_ratio(4, 250, 40.0, 200, 9).unwrap();
    assert!((chance - 0.4).abs() < 0.01, "{chance}");
}

#[test]
fn scored_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = TokenCorpus::new((0..40).map(|i| i % 6).collect(), 6).unwrap();
    let model = NgramModel::train(&corpus.ids, 6, 2, 0.01).unwrap();
    let scored = score_corpus(&corpus, 8, 3, |ids| model.score(ids)).unwrap();
    assert_eq!(scored.len(), 5);
    let path = dir.path().join("c.scored");
    write_scored(&path, &scored).unwrap();
    let back = read_scored(&path).unwrap();
    assert_eq!(back, scored);
    let (ids, nll) = back.batch(&[1, 4]).unwrap();
    assert_eq!(ids.shape(), &[2, 8]);
    assert_eq!(nll.shape(), &[2, 7]);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8] = 9;
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_scored(&path)
        .unwrap_err()
        .to_string()
        .contains("version 9"));
    bytes[8] = 1;
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_scored(&path).is_err());
}

proptest! {
    #[test]
    fn selection_is_scale_invariant(
        v in proptest::collection::vec(-100i32..100, 2..40),
        c in 1u32..50,
        d in -20i32..20,
        k in 1u32..=100,
    ) {
        let x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
        let y: Vec<f64> = x.iter().map(|&a| c as f64 * a + d as f64).collect();
        let a = select_topk(&t2(1, x), k as f64).unwrap();
        let b = select_topk(&t2(1, y), k as f64).unwrap();
        prop_assert_eq!(a.kept(), b.kept());
    }

    #[test]
    fn keep_all_loss_is_bit_identical_to_mean(
        v in proptest::collection::vec(0.0f64..10.0, 6),
    ) {
        let mut tape = Tape::<f64>::new();
        let nll = tape.constant(t2(2, v));
        let mean = tape.mean(&nll).unwrap();
        let filt = filtered_loss(&mut tape, &nll, &FilterMask::keep_all(2, 3).unwrap()).unwrap();
        prop_assert_eq!(mean.value().item().to_bits(), filt.value().item().to_bits());
    }
}
