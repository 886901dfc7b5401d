use std::sync::OnceLock;

use backsieve::filter::{select_topk, FilterMask};
use backsieve::model::{ModelConfig, Parameters};
use backsieve::rewrite::{check_equivalence, trace_with_markers, MarkerConfig, ReductionPlan};
use backsieve::tensor::Tensor;
use backsieve::train::record_step;
use proptest::prelude::*;

fn plan() -> &'static ReductionPlan {
    static PLAN: OnceLock<ReductionPlan> = OnceLock::new();
    PLAN.get_or_init(|| trace_with_markers(&ModelConfig::tiny(), &MarkerConfig::default()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // A plan traced at the marker extents applies at any batch and length.
    #[test]
    fn plan_applies_at_any_extent(bsz in 1usize..4, seq in 2usize..28, k in 1u32..=100, seed in 0u64..1000) {
        let r = check_equivalence::<f64>(&ModelConfig::tiny(), plan(), bsz, seq, k as f64, seed, None).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn kept_counts_are_uniform(bsz in 1usize..5, len in 1usize..60, k in 1u32..=100, seed in 0u64..1000) {
        let scores: Vec<f64> = (0..bsz * len).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64).collect();
        let m: FilterMask = select_topk(&Tensor::new(vec![bsz, len], scores).unwrap(), k as f64).unwrap();
        let want = (len * k as usize).div_ceil(100);
        for row in m.kept() {
            prop_assert_eq!(row.len(), want.max(1));
            prop_assert!(row.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn recording_is_replayable(seq in 2usize..20, seed in 0u64..1000) {
        let cfg = ModelConfig::tiny();
        let params = Parameters::<f32>::init(&cfg, seed).unwrap();
        let ids = Tensor::new(vec![2, seq], (0..2 * seq).map(|i| (i * 7 + seed as usize) % cfg.vocab_size).collect()).unwrap();
        let a = record_step(&cfg, &params, &ids, None).unwrap();
        let b = record_step(&cfg, &params, &ids, None).unwrap();
        prop_assert_eq!(a.tape.structure_hash(), b.tape.structure_hash());
        prop_assert_eq!(a.tape.enumerate_attributes(), b.tape.enumerate_attributes());
    }
}
