//! Dice coefficient and Wilcoxon signed-rank test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umct::metrics::{dsc, foreground_dsc, wilcoxon_signed_rank, wilcoxon_signed_rank_with, WilcoxonMethod};
use umct::LabelMap;

fn pairs(d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (d.to_vec(), vec![0.0; d.len()])
}

#[test]
fn exact_p_values_match_reference() {
    let (a, b) = pairs(&[0.8, -0.3, 1.4, 2.2, -0.5, 0.9, 1.7, 0.05, -1.1, 0.65]);
    assert!((wilcoxon_signed_rank(&a, &b).unwrap() - 0.130859375).abs() < 1e-12);
    let (a, b) = pairs(&[1.2, -0.4, 2.5, 0.7, 3.1, -0.2, 1.9, 0.6, 2.8, -1.5, 0.3, 1.1]);
    let exact = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Exact).unwrap();
    let normal = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Normal).unwrap();
    assert!((exact.p_value - 0.0341796875).abs() < 1e-12);
    assert!((normal.p_value - 0.037632883520140756).abs() < 1e-9);
}

#[test]
fn exact_and_normal_branches_agree_at_twelve() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let shift = rng.random_range(-0.5..0.5);
        let a: Vec<f64> = (0..12).map(|_| rng.random::<f64>() + shift).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let e = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Exact).unwrap();
        let n = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Normal).unwrap();
        assert!(e.exact && !n.exact);
        assert!((e.p_value - n.p_value).abs() <= 0.02, "{} vs {}", e.p_value, n.p_value);
    }
}

#[test]
fn swapping_samples_keeps_the_p_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a: Vec<f64> = (0..9).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..9).map(|_| rng.random()).collect();
    assert_eq!(wilcoxon_signed_rank(&a, &b).unwrap(), wilcoxon_signed_rank(&b, &a).unwrap());
}

#[test]
fn too_few_nonzero_differences() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let mut b = a;
    b[0] = 0.0;
    b[1] = 0.0;
    assert!(wilcoxon_signed_rank(&a, &b).is_err());
}

#[test]
fn dice_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let a = LabelMap::new([4, 5, 6], (0..120).map(|_| rng.random_range(0..3)).collect(), 3).unwrap();
        let b = LabelMap::new([4, 5, 6], (0..120).map(|_| rng.random_range(0..3)).collect(), 3).unwrap();
        for c in 0..3 {
            let x = dsc(&a, &b, c).unwrap();
            assert_eq!(x, dsc(&b, &a, c).unwrap());
            assert!((0.0..=1.0).contains(&x));
        }
        assert_eq!(foreground_dsc(&a, &a).unwrap(), 1.0);
    }
}
