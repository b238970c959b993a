//! Uncertainty-weighted label fusion.
//!
//! The pseudo label for view `i` is the confidence-weighted average of the
//! other views' canonical predictions:
//! `Ŷ_i = Σ_{j≠i} c_j p_j / Σ_{j≠i} c_j`.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::ProbMap;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel<T = f32> {
    pub target: ProbMap<T>,
    pub source_views: Vec<usize>,
    /// Normalized weights, aligned with `source_views`.
    pub weights: Vec<f64>,
    frozen: bool,
}

impl<T> PseudoLabel<T> {
    /// Whether the target is detached from differentiation.
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

fn check_inputs<T: Real>(preds: &[ProbMap<T>], exclude: usize) -> Result<()> {
    if preds.len() < 2 {
        return Err(Error::TooFew {
            what: "views for fusion",
            needed: 2,
            got: preds.len(),
        });
    }
    if exclude >= preds.len() {
        return Err(Error::invalid("exclude", format!("view {exclude} of {}", preds.len())));
    }
    for p in &preds[1..] {
        if p.shape() != preds[0].shape() || p.n_classes() != preds[0].n_classes() {
            return Err(Error::shape("fused prediction", &preds[0].shape(), &p.shape()));
        }
    }
    Ok(())
}

/// Confidence-weighted fusion of all views except `exclude`.
pub fn fuse<T: Real>(preds: &[ProbMap<T>], confidences: &[f64], exclude: usize) -> Result<PseudoLabel<T>> {
    check_inputs(preds, exclude)?;
    if confidences.len() != preds.len() {
        return Err(Error::shape("confidences", &[preds.len()], &[confidences.len()]));
    }
    if let Some(c) = confidences.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::invalid("confidence", format!("{c} is not positive and finite")));
    }
    let source_views: Vec<usize> = (0..preds.len()).filter(|&j| j != exclude).collect();
    let total: f64 = source_views.iter().map(|&j| confidences[j]).sum();
    let weights: Vec<f64> = source_views.iter().map(|&j| confidences[j] / total).collect();

    let len = preds[0].data().len();
    let mut acc = vec![0.0f64; len];
    for (&j, &w) in source_views.iter().zip(&weights) {
        for (a, &v) in acc.iter_mut().zip(preds[j].data()) {
            *a += w * v.as_f64();
        }
    }
    let target = ProbMap::from_parts_unchecked(
        preds[0].n_classes(),
        preds[0].shape(),
        acc.into_iter().map(T::of).collect(),
    );
    Ok(PseudoLabel {
        target,
        source_views,
        weights,
        frozen: false,
    })
}

/// Equal-weight fusion; the ablation baseline without uncertainty weighting.
pub fn fuse_uniform<T: Real>(preds: &[ProbMap<T>], exclude: usize) -> Result<PseudoLabel<T>> {
    check_inputs(preds, exclude)?;
    fuse(preds, &vec![1.0; preds.len()], exclude)
}

/// Marks the pseudo label as a constant optimization target. The value is unchanged;
/// loss gradients flow only into the prediction it is compared against.
pub fn stop_gradient_wrap<T>(mut pl: PseudoLabel<T>) -> PseudoLabel<T> {
    pl.frozen = true;
    pl
}
