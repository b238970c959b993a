//! MC-dropout uncertainty against a two-pass variance oracle, and fusion invariants.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umct::fusion::{fuse, fuse_uniform, stop_gradient_wrap};
use umct::uncertainty::{confidence, epistemic, DEFAULT_EPS};
use umct::ProbMap;

fn random_map(rng: &mut impl Rng, c: usize, shape: [usize; 3]) -> ProbMap<f64> {
    let n = shape.iter().product::<usize>();
    let raw: Vec<f64> = (0..c * n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let mut data = vec![0.0; c * n];
    for v in 0..n {
        let s: f64 = (0..c).map(|k| raw[k * n + v]).sum();
        for k in 0..c {
            data[k * n + v] = raw[k * n + v] / s;
        }
    }
    ProbMap::new(c, shape, data).unwrap()
}

/// Mean first, then mean squared deviation.
fn two_pass_variance(samples: &[ProbMap<f64>]) -> f64 {
    let k = samples.len() as f64;
    let len = samples[0].data().len();
    let mut total = 0.0;
    for i in 0..len {
        let mean = samples.iter().map(|s| s.data()[i]).sum::<f64>() / k;
        total += samples.iter().map(|s| (s.data()[i] - mean).powi(2)).sum::<f64>() / k;
    }
    total
}

#[test]
fn epistemic_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let c = rng.random_range(2..4);
        let shape = [rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5)];
        let stack: Vec<_> = (0..10).map(|_| random_map(&mut rng, c, shape)).collect();
        let got = epistemic(&stack).unwrap();
        let want = two_pass_variance(&stack);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn identical_stacks_have_zero_uncertainty() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let m = random_map(&mut rng, 3, [4, 4, 4]);
        assert_eq!(epistemic(&vec![m; 10]).unwrap(), 0.0);
    }
}

#[test]
fn any_difference_gives_positive_uncertainty() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = random_map(&mut rng, 2, [3, 3, 3]);
    let mut stack = vec![m; 10];
    stack[7] = random_map(&mut rng, 2, [3, 3, 3]);
    assert!(epistemic(&stack).unwrap() > 0.0);
}

#[test]
fn two_views_degenerate_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let preds = vec![random_map(&mut rng, 3, [2, 3, 4]), random_map(&mut rng, 3, [2, 3, 4])];
        let conf = [rng.random::<f64>() + 0.1, rng.random::<f64>() + 0.1];
        assert_eq!(fuse(&preds, &conf, 0).unwrap().target, preds[1]);
        assert_eq!(fuse(&preds, &conf, 1).unwrap().target, preds[0]);
    }
}

#[test]
fn frozen_pseudo_label_keeps_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let preds: Vec<_> = (0..3).map(|_| random_map(&mut rng, 2, [2, 2, 2])).collect();
    let pl = fuse_uniform(&preds, 0).unwrap();
    let frozen = stop_gradient_wrap(pl.clone());
    assert!(frozen.is_frozen() && !pl.is_frozen());
    assert_eq!(frozen.target, pl.target);
}

fn fusion_input() -> impl Strategy<Value = (Vec<ProbMap<f64>>, Vec<f64>, usize, f64)> {
    (2usize..7, 2usize..4, any::<u64>()).prop_flat_map(|(n, c, seed)| {
        (
            Just({
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| random_map(&mut rng, c, [2, 3, 2])).collect::<Vec<_>>()
            }),
            prop::collection::vec(1e-6f64..1e6, n),
            0..n,
            1e-3f64..1e3,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_targets_are_simplices((preds, conf, ex, _) in fusion_input()) {
        let pl = fuse(&preds, &conf, ex).unwrap();
        prop_assert!(pl.target.validate().is_ok());
        prop_assert!(!pl.source_views.contains(&ex));
        prop_assert_eq!(pl.source_views.len(), preds.len() - 1);
        prop_assert!((pl.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn confidence_scale_invariance((preds, conf, ex, k) in fusion_input()) {
        let a = fuse(&preds, &conf, ex).unwrap();
        let scaled: Vec<f64> = conf.iter().map(|c| c * k).collect();
        let b = fuse(&preds, &scaled, ex).unwrap();
        for (x, y) in a.target.data().iter().zip(b.target.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn confidence_is_monotone(u1 in 0.0f64..1e6, du in 1e-6f64..1e6) {
        let u2 = u1 + du;
        prop_assert!(confidence(u1, DEFAULT_EPS) > confidence(u2, DEFAULT_EPS));
        prop_assert!(confidence(u2, DEFAULT_EPS) > 0.0);
    }
}
