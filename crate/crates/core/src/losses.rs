//! Multi-class soft Dice loss and the composite co-training objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::PseudoLabel;
use crate::real::Real;
use crate::volume::{one_hot, LabelMap, ProbMap};

/// Denominator smoothing used unless a caller overrides it.
pub const DEFAULT_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub supervised: f64,
    pub cotraining: f64,
    pub per_view_supervised: Vec<f64>,
    pub per_view_cotraining: Vec<f64>,
    pub lambda_cot: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.supervised.is_finite()
            && self.cotraining.is_finite()
            && self.per_view_supervised.iter().all(|v| v.is_finite())
            && self.per_view_cotraining.iter().all(|v| v.is_finite())
    }
}

fn check_pair<T: Real>(pred: &ProbMap<T>, target: &ProbMap<T>) -> Result<()> {
    if pred.shape() != target.shape() || pred.n_classes() != target.n_classes() {
        let dims = |p: &ProbMap<T>| {
            let [d, h, w] = p.shape();
            vec![p.n_classes(), d, h, w]
        };
        return Err(Error::shape("dice pred vs target", &dims(target), &dims(pred)));
    }
    Ok(())
}

/// Per-class intersection and denominator sums in `f64`.
fn class_sums<T: Real>(pred: &ProbMap<T>, target: &ProbMap<T>, c: usize, smooth: f64) -> (f64, f64) {
    let (mut inter, mut denom) = (0.0f64, smooth);
    for (&p, &y) in pred.channel(c).iter().zip(target.channel(c)) {
        let (p, y) = (p.as_f64(), y.as_f64());
        inter += p * y;
        denom += p * p + y * y;
    }
    (inter, denom)
}

/// `mean_c [1 − 2Σ y·ŷ / (Σ y² + Σ ŷ² + smooth)]` over all classes, background included.
///
/// A class absent from both maps with `smooth = 0` contributes 0.
pub fn dice_loss<T: Real>(pred: &ProbMap<T>, target: &ProbMap<T>, smooth: f64) -> Result<f64> {
    check_pair(pred, target)?;
    let c = pred.n_classes();
    let total: f64 = (0..c)
        .map(|k| {
            let (inter, denom) = class_sums(pred, target, k, smooth);
            if denom > 0.0 {
                1.0 - 2.0 * inter / denom
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / c as f64)
}

/// Dice loss and its gradient with respect to `pred` (same layout as `pred.data()`).
/// The target is a constant.
pub fn dice_loss_grad<T: Real>(pred: &ProbMap<T>, target: &ProbMap<T>, smooth: f64) -> Result<(f64, Vec<T>)> {
    check_pair(pred, target)?;
    let c = pred.n_classes();
    let n = pred.voxels();
    let inv_c = 1.0 / c as f64;
    let mut grad = vec![T::zero(); pred.data().len()];
    let mut total = 0.0;
    for k in 0..c {
        let (inter, denom) = class_sums(pred, target, k, smooth);
        if denom <= 0.0 {
            continue;
        }
        total += 1.0 - 2.0 * inter / denom;
        // d/dp [1 − 2I/S] = (4 I p − 2 y S) / S²
        let a = 4.0 * inter / (denom * denom) * inv_c;
        let b = 2.0 / denom * inv_c;
        let g = &mut grad[k * n..(k + 1) * n];
        for ((g, &p), &y) in g.iter_mut().zip(pred.channel(k)).zip(target.channel(k)) {
            *g = T::of(a * p.as_f64() - b * y.as_f64());
        }
    }
    Ok((total * inv_c, grad))
}

/// `Σ_i dice(p_i, one_hot(y))` over canonical per-view predictions.
pub fn supervised_loss<T: Real>(canonical_preds: &[ProbMap<T>], y: &LabelMap) -> Result<f64> {
    let target: ProbMap<T> = one_hot(y);
    canonical_preds
        .iter()
        .map(|p| dice_loss(p, &target, DEFAULT_SMOOTH))
        .sum()
}

/// `Σ_i dice(p_i, Ŷ_i)` with each pseudo label treated as a constant.
pub fn cotraining_loss<T: Real>(canonical_preds: &[ProbMap<T>], pseudo: &[PseudoLabel<T>]) -> Result<f64> {
    if canonical_preds.len() != pseudo.len() {
        return Err(Error::shape("pseudo labels", &[canonical_preds.len()], &[pseudo.len()]));
    }
    for (i, pl) in pseudo.iter().enumerate() {
        if pl.source_views.contains(&i) {
            return Err(Error::invalid("pseudo label", format!("view {i} fused from its own prediction")));
        }
    }
    canonical_preds
        .iter()
        .zip(pseudo)
        .map(|(p, pl)| dice_loss(p, &pl.target, DEFAULT_SMOOTH))
        .sum()
}

/// `sup + λ_cot · cot`.
pub fn total_loss(sup: f64, cot: f64, lambda_cot: f64) -> f64 {
    sup + lambda_cot * cot
}
