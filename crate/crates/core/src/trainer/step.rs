//! One optimization step: per-view forward passes in canonical orientation,
//! MC-dropout confidences, fused pseudo labels and the SGD update.

use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_uniform, stop_gradient_wrap, PseudoLabel};
use crate::losses::{dice_loss_grad, total_loss, LossReport, DEFAULT_SMOOTH};
use crate::nn::{build_model, DropoutMasks, ForwardCache, Sgd, ViewModel};
use crate::real::Real;
use crate::uncertainty::{confidence, epistemic};
use crate::views::{apply, apply_channels, inverse, standard_view_set, ViewSet};
use crate::volume::{one_hot, LabelMap, ProbMap, Volume3D};

use super::config::{FusionKind, TrainConfig};
use super::rng::{stream_seed, Stream};

/// A labeled training patch in canonical orientation.
pub type LabeledPatch<T> = (Volume3D<T>, LabelMap);

/// Models, optimizers and progress of one training run.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real = f32> {
    pub views: ViewSet,
    pub models: Vec<ViewModel<T>>,
    pub optimizers: Vec<Sgd<T>>,
    /// Completed optimization steps over both stages.
    pub iter: u64,
}

impl<T: Real> TrainState<T> {
    /// Fresh models for `cfg.n_views` standard views, seeded per view.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let views = if cfg.n_views == 1 {
            ViewSet::new(vec![crate::views::AXIAL], vec!["axial".into()])?
        } else {
            standard_view_set(cfg.n_views)?
        };
        let models = views
            .transforms()
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut m = build_model::<T>(&cfg.model, t, stream_seed(cfg.seed, Stream::Init, &[i as u64]))?;
                m.dropout_seed = stream_seed(cfg.seed, Stream::Dropout, &[i as u64]);
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_models(views, models, cfg.lr_stage1, cfg))
    }

    pub fn from_models(views: ViewSet, models: Vec<ViewModel<T>>, lr: f64, cfg: &TrainConfig) -> Self {
        let optimizers = models
            .iter()
            .map(|m| Sgd::new(m.n_params(), lr, cfg.momentum, cfg.weight_decay))
            .collect();
        TrainState { views, models, optimizers, iter: 0 }
    }

    /// Fresh optimizers (zero momentum) at learning rate `lr`.
    pub fn reset_optimizers(&mut self, lr: f64, cfg: &TrainConfig) {
        for (o, m) in self.optimizers.iter_mut().zip(&self.models) {
            *o = Sgd::new(m.n_params(), lr, cfg.momentum, cfg.weight_decay);
        }
    }

    pub fn n_views(&self) -> usize {
        self.models.len()
    }
}

/// A forward pass kept for backpropagation, with its canonical-orientation output.
pub(crate) struct ViewPass<T> {
    cache: ForwardCache<T>,
    pub canon: ProbMap<T>,
}

pub(crate) fn view_pass<T: Real>(m: &ViewModel<T>, x: &Volume3D<T>) -> Result<ViewPass<T>> {
    view_pass_masked(m, x, None)
}

pub(crate) fn view_pass_masked<T: Real>(m: &ViewModel<T>, x: &Volume3D<T>, masks: Option<DropoutMasks<T>>) -> Result<ViewPass<T>> {
    let t = m.view();
    let cache = m.forward_train(&apply(t, x), masks)?;
    let canon = apply(inverse(t), &cache.probs());
    Ok(ViewPass { cache, canon })
}

/// Maps a canonical `dL/dp` into view orientation, scales it and backpropagates.
pub(crate) fn backprop<T: Real>(m: &ViewModel<T>, pass: &ViewPass<T>, grad_canon: &[T], scale: f64, grads: &mut [T]) {
    let (_, mut g) = apply_channels(m.view(), pass.canon.shape(), pass.canon.n_classes(), grad_canon);
    let s = T::of(scale);
    for v in &mut g {
        *v *= s;
    }
    m.backward(&pass.cache, &g, grads);
}

/// Mean supervised Dice over the batch; gradients accumulate into `grads`.
pub(crate) fn supervised_grad<T: Real>(
    m: &ViewModel<T>,
    batch: &[LabeledPatch<T>],
    passes: &[ViewPass<T>],
    grads: &mut [T],
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ((_, y), pass) in batch.iter().zip(passes) {
        let (l, g) = dice_loss_grad(&pass.canon, &one_hot::<T>(y), DEFAULT_SMOOTH)?;
        loss += l * scale;
        backprop(m, pass, &g, scale, grads);
    }
    Ok(loss)
}

/// What one co-training step observed.
#[derive(Clone, Debug)]
pub struct StepOutcome<T: Real = f32> {
    pub report: LossReport,
    /// Per view: mean epistemic uncertainty over the unlabeled batch (empty under uniform fusion).
    pub uncertainty: Vec<f64>,
    /// Per view: mean confidence over the unlabeled batch (empty under uniform fusion).
    pub confidence: Vec<f64>,
    /// `pseudo_labels[sample][view]`.
    pub pseudo_labels: Vec<Vec<PseudoLabel<T>>>,
}

fn check_finite(iter: u64, report: &LossReport, unc: &[f64]) -> Result<()> {
    if report.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        iter,
        diagnostic: format!(
            "sup {:?}, cot {:?}, uncertainty {:?}",
            report.per_view_supervised, report.per_view_cotraining, unc
        ),
    })
}

/// One supervised SGD update of every view on the same labeled batch.
pub fn supervised_step<T: Real>(state: &mut TrainState<T>, labeled: &[LabeledPatch<T>]) -> Result<LossReport> {
    let models = &state.models;
    let results = crate::par::try_map_indexed(models.len(), |i| {
        let m = &models[i];
        let passes = labeled.iter().map(|(x, _)| view_pass(m, x)).collect::<Result<Vec<_>>>()?;
        let mut grads = vec![T::zero(); m.n_params()];
        let loss = supervised_grad(m, labeled, &passes, &mut grads)?;
        Ok::<_, Error>((loss, grads))
    })?;
    let per_view_supervised: Vec<f64> = results.iter().map(|r| r.0).collect();
    let sup = per_view_supervised.iter().sum();
    let report = LossReport {
        total: sup,
        supervised: sup,
        cotraining: 0.0,
        per_view_supervised,
        per_view_cotraining: vec![0.0; models.len()],
        lambda_cot: 0.0,
    };
    check_finite(state.iter, &report, &[])?;
    for ((m, o), (_, g)) in state.models.iter_mut().zip(&mut state.optimizers).zip(&results) {
        o.step(m.params_mut(), g);
    }
    state.iter += 1;
    Ok(report)
}

struct ViewForward<T> {
    labeled: Vec<ViewPass<T>>,
    unlabeled: Vec<ViewPass<T>>,
    uncertainty: Vec<f64>,
}

/// One co-training step: `Σ_i L_sup,i + λ Σ_i L_cot,i` and one SGD update per view.
///
/// Both batches are in canonical orientation. Pseudo labels are fused from the
/// current (pre-update) predictions of the other views and held constant.
/// `labeled` may be empty (source-free adaptation).
pub fn cotrain_step<T: Real>(
    state: &mut TrainState<T>,
    labeled: &[LabeledPatch<T>],
    unlabeled: &[Volume3D<T>],
    cfg: &TrainConfig,
) -> Result<StepOutcome<T>> {
    let n = state.n_views();
    if n < 2 {
        return Err(Error::TooFew { what: "views for co-training", needed: 2, got: n });
    }
    if unlabeled.is_empty() {
        return Err(Error::TooFew { what: "unlabeled patches", needed: 1, got: 0 });
    }
    let iter = state.iter;
    let use_uncertainty = cfg.fusion == FusionKind::Uncertainty;
    let models = &state.models;

    let forward = crate::par::try_map_indexed(n, |i| {
        let m = &models[i];
        let labeled = labeled.iter().map(|(x, _)| view_pass(m, x)).collect::<Result<Vec<_>>>()?;
        let unlabeled_passes = unlabeled.iter().map(|x| view_pass(m, x)).collect::<Result<Vec<_>>>()?;
        let mut uncertainty = Vec::new();
        if use_uncertainty {
            for (s, x) in unlabeled.iter().enumerate() {
                let seed = stream_seed(cfg.seed, Stream::Dropout, &[iter, s as u64]);
                let samples = m.mc_sample(&apply(m.view(), x), cfg.mc_samples, seed)?;
                uncertainty.push(epistemic(&samples)?);
            }
        }
        Ok::<_, Error>(ViewForward { labeled, unlabeled: unlabeled_passes, uncertainty })
    })?;

    let mut pseudo_labels = Vec::with_capacity(unlabeled.len());
    for s in 0..unlabeled.len() {
        let preds: Vec<ProbMap<T>> = forward.iter().map(|f| f.unlabeled[s].canon.clone()).collect();
        let conf: Vec<f64> = forward.iter().map(|f| f.uncertainty.get(s).map_or(1.0, |&u| confidence(u, cfg.confidence_eps))).collect();
        let per_view = (0..n)
            .map(|i| {
                let pl = if use_uncertainty { fuse(&preds, &conf, i)? } else { fuse_uniform(&preds, i)? };
                Ok(stop_gradient_wrap(pl))
            })
            .collect::<Result<Vec<_>>>()?;
        pseudo_labels.push(per_view);
    }

    let lambda = cfg.lambda_cot;
    let pls = &pseudo_labels;
    let forward_ref = &forward;
    let results = crate::par::try_map_indexed(n, |i| {
        let m = &models[i];
        let f = &forward_ref[i];
        let mut grads = vec![T::zero(); m.n_params()];
        let sup = supervised_grad(m, labeled, &f.labeled, &mut grads)?;
        let scale = lambda / unlabeled.len() as f64;
        let mut cot = 0.0;
        for (s, pass) in f.unlabeled.iter().enumerate() {
            let pl = &pls[s][i];
            debug_assert!(pl.is_frozen() && !pl.source_views.contains(&i));
            let (l, g) = dice_loss_grad(&pass.canon, &pl.target, DEFAULT_SMOOTH)?;
            cot += l / unlabeled.len() as f64;
            if lambda > 0.0 {
                backprop(m, pass, &g, scale, &mut grads);
            }
        }
        Ok::<_, Error>((sup, cot, grads))
    })?;

    let per_view_supervised: Vec<f64> = results.iter().map(|r| r.0).collect();
    let per_view_cotraining: Vec<f64> = results.iter().map(|r| r.1).collect();
    let sup: f64 = per_view_supervised.iter().sum();
    let cot: f64 = per_view_cotraining.iter().sum();
    let report = LossReport {
        total: total_loss(sup, cot, lambda),
        supervised: sup,
        cotraining: cot,
        per_view_supervised,
        per_view_cotraining,
        lambda_cot: lambda,
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let uncertainty: Vec<f64> = if use_uncertainty { forward.iter().map(|f| mean(&f.uncertainty)).collect() } else { Vec::new() };
    let confidence_out: Vec<f64> = if use_uncertainty {
        forward
            .iter()
            .map(|f| mean(&f.uncertainty.iter().map(|&u| confidence(u, cfg.confidence_eps)).collect::<Vec<_>>()))
            .collect()
    } else {
        Vec::new()
    };
    check_finite(iter, &report, &uncertainty)?;

    for ((m, o), (_, _, g)) in state.models.iter_mut().zip(&mut state.optimizers).zip(&results) {
        o.step(m.params_mut(), g);
    }
    state.iter += 1;
    Ok(StepOutcome { report, uncertainty, confidence: confidence_out, pseudo_labels })
}
