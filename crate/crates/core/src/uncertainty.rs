//! MC-dropout epistemic uncertainty and the confidence transform.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::ProbMap;

/// Default additive guard in `1 / (u + eps)`.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Epistemic uncertainty of one view on one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceScore {
    pub uncertainty: f64,
    pub confidence: f64,
}

impl ConfidenceScore {
    pub fn from_uncertainty(uncertainty: f64, eps: f64) -> Self {
        ConfidenceScore {
            uncertainty,
            confidence: confidence(uncertainty, eps),
        }
    }
}

/// Volume-summed variance of `K` sampled probability maps.
///
/// Each element contributes the divide-by-K variance `mean(y²) − mean(y)²`, clamped at
/// zero against roundoff; contributions are summed over channels and voxels.
pub fn epistemic<T: Real>(samples: &[ProbMap<T>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFew {
            what: "MC samples",
            needed: 2,
            got: samples.len(),
        });
    }
    let first = &samples[0];
    for s in &samples[1..] {
        if s.shape() != first.shape() || s.n_classes() != first.n_classes() {
            let dims = |p: &ProbMap<T>| {
                let [d, h, w] = p.shape();
                vec![p.n_classes(), d, h, w]
            };
            return Err(Error::shape("MC sample", &dims(first), &dims(s)));
        }
    }
    // shifted by the first sample: exact zeros for identical stacks, no cancellation
    let k = samples.len() as f64;
    let base = first.data();
    let len = base.len();
    let mut sum = vec![0.0f64; len];
    let mut sum_sq = vec![0.0f64; len];
    for s in &samples[1..] {
        for (((a, b), &v), &v0) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(s.data()).zip(base) {
            let d = v.as_f64() - v0.as_f64();
            *a += d;
            *b += d * d;
        }
    }
    let total = sum
        .iter()
        .zip(&sum_sq)
        .map(|(&s, &sq)| {
            let mean = s / k;
            (sq / k - mean * mean).max(0.0)
        })
        .sum();
    Ok(total)
}

/// `h(u) = 1 / (u + eps)`.
pub fn confidence(u: f64, eps: f64) -> f64 {
    debug_assert!(u >= 0.0);
    1.0 / (u + eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(v: &[f64]) -> ProbMap<f64> {
        let n = v.len();
        let mut data = v.to_vec();
        data.extend(v.iter().map(|x| 1.0 - x));
        ProbMap::new(2, [1, 1, n], data).unwrap()
    }

    #[test]
    fn identical_samples_have_zero_uncertainty() {
        let a = pm(&[0.3, 0.9, 0.123_456_7]);
        assert_eq!(epistemic(&vec![a; 10]).unwrap(), 0.0);
    }

    #[test]
    fn single_differing_scalar() {
        // channel 0 differs 0 vs 1 at one voxel; channel 1 mirrors it, so 2 × 0.25
        let a = pm(&[0.0, 0.5]);
        let b = pm(&[1.0, 0.5]);
        assert!((epistemic(&[a, b]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let a = pm(&[0.1]);
        assert!(epistemic(&[a.clone()]).is_err());
        assert!(epistemic(&[a, pm(&[0.1, 0.2])]).is_err());
    }

    #[test]
    fn confidence_formula() {
        assert_eq!(confidence(0.0, 1e-8), 1e8);
        let a = confidence(1.0, 0.0);
        let b = confidence(1.0, 1e-8);
        assert!((a - b).abs() / a < 1e-7);
    }
}
