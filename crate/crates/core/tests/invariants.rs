mod common;

use pastn::data::{featurize_and_window, synthetic_start, RawSeries, Scaler};
use pastn::metrics::compute_metrics;
use pastn::tensor::Tensor;
use pastn::train::chronological_split;
use proptest::prelude::*;

#[test]
fn rows_are_stochastic() {
    for seed in 0..100 {
        let dev = common::stochasticity_deviation(seed);
        assert!(dev < 1e-10, "seed {seed}: {dev:e}");
    }
}

#[test]
fn stlm_ignores_the_future() {
    for seed in 0..20 {
        assert!(common::stlm_is_causal(seed), "seed {seed}");
    }
}

#[test]
fn attention_commutes_with_time_permutation() {
    for seed in 0..20 {
        let e = common::attention_equivariance_error(seed);
        assert!(e < 1e-12, "seed {seed}: {e:e}");
    }
}

fn vec_tensor(v: Vec<f64>) -> Tensor {
    Tensor::from_vec(v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50)) {
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = compute_metrics(&vec_tensor(p.clone()), &vec_tensor(y.clone()), 1.0).unwrap();
        prop_assert!(r.overall.rmse + 1e-12 >= r.overall.mae);
        prop_assert!(r.overall.mae >= 0.0);
        let s = compute_metrics(&vec_tensor(y), &vec_tensor(p), 1.0).unwrap();
        prop_assert_eq!(r.overall.mae, s.overall.mae);
        prop_assert_eq!(r.overall.rmse, s.overall.rmse);
    }

    #[test]
    fn metrics_ignore_order(pairs in prop::collection::vec((0.0f64..50.0, 0.5f64..50.0), 2..40), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut common::rng(seed));
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (ps, ys): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
        let a = compute_metrics(&vec_tensor(p), &vec_tensor(y), 1.0).unwrap().overall;
        let b = compute_metrics(&vec_tensor(ps), &vec_tensor(ys), 1.0).unwrap().overall;
        prop_assert!((a.mae - b.mae).abs() < 1e-12);
        prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
        prop_assert!((a.mape.unwrap() - b.mape.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn splits_never_overlap(windows in 30usize..5000, span in 1usize..10) {
        if let Ok(s) = chronological_split(windows, span, (0.6, 0.2, 0.2)) {
            prop_assert!(s.train.end <= s.val.start && s.val.end <= s.test.start);
            prop_assert!(s.train.start == 0 && s.test.end == windows);
            // no raw step is shared across splits
            prop_assert!(s.train.end - 1 + span <= s.val.start);
            prop_assert!(s.val.end - 1 + span <= s.test.start);
        }
    }

    #[test]
    fn scaler_round_trip(x in -1e4f64..1e4, mean in -100.0f64..100.0, std in 0.01f64..100.0) {
        let s = Scaler { mean, std, num_nodes: 1 };
        prop_assert!((s.denormalize(s.normalize(x)) - x).abs() < 1e-12 * x.abs().max(1.0) * 10.0);
    }
}

#[test]
fn scaler_ignores_test_data() {
    let s = 400;
    let base = Tensor::from_fn(vec![s, 2], |ix| ((ix[0] * 31 + ix[1] * 7) % 17) as f64);
    let raw = RawSeries { values: base.clone(), start: synthetic_start(), node_ids: vec!["node_0".into(), "node_1".into()] };
    let a = featurize_and_window(&raw, 12, 12).unwrap();
    let mut changed = raw.clone();
    for t in a.splits.test.start + 12..s {
        changed.values.set(&[t, 0], 1e6 + t as f64);
    }
    let b = featurize_and_window(&changed, 12, 12).unwrap();
    assert_eq!(a.scaler.mean.to_bits(), b.scaler.mean.to_bits());
    assert_eq!(a.scaler.std.to_bits(), b.scaler.std.to_bits());
}
