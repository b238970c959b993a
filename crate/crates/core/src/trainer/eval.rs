//! Held-out evaluation of view models: single-view and ensemble DSC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::nn::ViewModel;
use crate::pipeline::{ensemble, multi_view_predict, EnsembleMode, WindowSpec};
use crate::real::Real;
use crate::views::ViewSet;
use crate::volume::{Case, LabelMap};

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub per_view: Vec<EvalResult>,
    pub average: EvalResult,
    pub majority: EvalResult,
}

/// Mean foreground DSC figures plus per-case values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_view_dsc: Vec<f64>,
    pub ensemble_dsc: f64,
    pub majority_dsc: f64,
    pub case_ids: Vec<String>,
    /// `per_case_view_dsc[view][case]`.
    pub per_case_view_dsc: Vec<Vec<f64>>,
    pub per_case_ensemble_dsc: Vec<f64>,
}

impl Evaluation {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            per_view_dsc: self.per_view.iter().map(|r| r.mean_foreground()).collect(),
            ensemble_dsc: self.average.mean_foreground(),
            majority_dsc: self.majority.mean_foreground(),
            case_ids: self.average.case_ids.clone(),
            per_case_view_dsc: self.per_view.iter().map(|r| r.per_case_foreground()).collect(),
            per_case_ensemble_dsc: self.average.per_case_foreground(),
        }
    }
}

/// Sliding-window predictions of every model on every case, scored against the
/// case labels.
pub fn evaluate<T: Real>(models: &[ViewModel<T>], views: &ViewSet, cases: &[Case], window: &WindowSpec) -> Result<Evaluation> {
    let n = models.len();
    let mut ids = Vec::with_capacity(cases.len());
    let mut gts = Vec::with_capacity(cases.len());
    let mut per_view: Vec<Vec<LabelMap>> = vec![Vec::new(); n];
    let mut avg = Vec::new();
    let mut maj = Vec::new();
    for case in cases {
        let gt = case.label.clone().ok_or_else(|| Error::invalid("evaluation case", format!("{} has no label", case.id)))?;
        let preds = multi_view_predict(models, views, &case.volume.cast::<T>(), window)?;
        for (i, p) in preds.iter().enumerate() {
            per_view[i].push(p.argmax());
        }
        avg.push(ensemble(&preds, EnsembleMode::Average)?);
        maj.push(ensemble(&preds, EnsembleMode::Majority)?);
        ids.push(case.id.clone());
        gts.push(gt);
    }
    Ok(Evaluation {
        per_view: per_view
            .iter()
            .map(|p| EvalResult::from_predictions(&ids, p, &gts))
            .collect::<Result<Vec<_>>>()?,
        average: EvalResult::from_predictions(&ids, &avg, &gts)?,
        majority: EvalResult::from_predictions(&ids, &maj, &gts)?,
    })
}
