mod common;

use proptest::prelude::*;
use tempograph::autodiff::Tape;
use tempograph::loss::{hh_loss, log_softmax_stable, part_kl, part_weights_from_variance, softmax_pool, PartLabelMap};
use tempograph::tensor::Tensor;

#[test]
fn kl_is_nonnegative_and_zero_only_on_identity() {
    let (min_kl, max_self) = common::kl_extremes(10_000, 5);
    assert!(min_kl > 0.0, "min KL {min_kl}");
    assert!(max_self < 1e-15, "KL(p||p) up to {max_self}");
}

#[test]
fn kl_against_hand_value() {
    // KL([.5,.5] || [.25,.75]) with y_true second
    let v = part_kl(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
    let oracle = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    assert!((v - oracle).abs() < 1e-15);
}

#[test]
fn log_softmax_ignores_shifts() {
    let worst = common::log_softmax_shift_deviation(10_000, 6);
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn log_softmax_survives_large_logits() {
    let x = Tensor::new(&[3], vec![1000.0, 999.0, -1000.0]).unwrap();
    let l = log_softmax_stable(&x, 0).unwrap();
    assert!(l.data().iter().all(|v| v.is_finite()));
    let z = (1.0 + (-1.0f64).exp()).ln();
    assert!((l.data()[0] + z).abs() < 1e-12 && (l.data()[1] + 1.0 + z).abs() < 1e-12);
}

#[test]
fn every_part_is_gated_once() {
    assert_eq!(common::gate_violations(2_000, 7), 0);
}

#[test]
fn variance_weights_by_hand() {
    let map = PartLabelMap::new(vec![(0, 1), (2, 3), (4, 5), (6, 7)], 8).unwrap();
    // part variances 3, 1, 1, 1 out of a total of 6, scaled to sum to 4
    let a = [3f64.sqrt(), 1.0, 1.0, 1.0];
    let f = Tensor::new(&[8, 1], (0..8).map(|i| if i % 2 == 0 { a[i / 2] } else { -a[i / 2] }).collect()).unwrap();
    let l = part_weights_from_variance(&f, &map).unwrap();
    for (x, y) in l.iter().zip([2.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]) {
        assert!((x - y).abs() < 1e-12, "{l:?}");
    }
}

#[test]
fn hierarchical_loss_vanishes_on_matching_features() {
    let mut rng = common::rng(2);
    let map = PartLabelMap::new(vec![(0, 2), (3, 3), (4, 8)], 9).unwrap();
    let f = Tensor::randn(&[4, 9, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let v = tape.var(f.clone());
    let l = hh_loss(&mut tape, v, &f, &map).unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hierarchical_loss_is_weighted_kl_sum(n in 2usize..12, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let m = 1 + (seed as usize) % n.min(4);
        let ranges = common::random_partition(&mut rng, n, m);
        let lambda: Vec<f64> = (0..m).map(|i| 0.5 + i as f64).collect();
        let map = PartLabelMap::new(ranges, n).unwrap().with_lambda(lambda.clone()).unwrap();
        let pred = Tensor::randn(&[n, 2], 1.0, &mut rng);
        let truth = Tensor::randn(&[n, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let pv = tape.var(pred.clone());
        let l = hh_loss(&mut tape, pv, &truth, &map).unwrap();
        let (dp, dt) = (softmax_pool(&pred, &map).unwrap(), softmax_pool(&truth, &map).unwrap());
        let oracle: f64 = (0..m).map(|p| lambda[p] * part_kl(&dp.parts[p], &dt.parts[p]).unwrap()).sum();
        prop_assert!((tape.value(l).item() - oracle).abs() < 1e-10);
        prop_assert!(tape.value(l).item() >= -1e-15);
    }

    #[test]
    fn variance_weights_sum_to_part_count(n in 2usize..20, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let m = 1 + (seed as usize) % n.min(6);
        let map = PartLabelMap::new(common::random_partition(&mut rng, n, m), n).unwrap();
        let f = Tensor::randn(&[3, n, 2], 1.0, &mut rng);
        let l = part_weights_from_variance(&f, &map).unwrap();
        prop_assert!((l.iter().sum::<f64>() - m as f64).abs() < 1e-12);
        prop_assert!(l.iter().all(|&v| v >= 0.0));
    }
}
