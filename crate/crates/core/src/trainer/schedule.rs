//! Stage 1 pretraining, stage 2 co-training and the self-training baseline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{dice_loss_grad, DEFAULT_SMOOTH};
use crate::metrics::foreground_dsc;
use crate::pipeline::{extract, multi_view_predict, sample_patch, PatchSpec, WindowSpec};
use crate::real::Real;
use crate::volume::{one_hot, Case, DatasetSplit, LabelMap, Mode, Volume3D};

use super::config::TrainConfig;
use super::log::{MetricRow, MetricsLog};
use super::rng::{stream, Stream};
use super::step::{backprop, cotrain_step, supervised_grad, view_pass, view_pass_masked, LabeledPatch, TrainState};

/// `n` labeled patches from uniformly chosen cases, foreground-biased per `spec`.
pub fn draw_labeled<T: Real>(cases: &[Case], n: usize, spec: &PatchSpec, rng: &mut impl Rng) -> Result<Vec<LabeledPatch<T>>> {
    if cases.is_empty() {
        return Err(Error::TooFew { what: "labeled cases", needed: 1, got: 0 });
    }
    (0..n)
        .map(|_| {
            let case = &cases[rng.random_range(0..cases.len())];
            match sample_patch(case, spec, rng) {
                (v, Some(l)) => Ok((v.cast(), l)),
                _ => Err(Error::invalid("labeled set", format!("case {} has no label", case.id))),
            }
        })
        .collect()
}

/// `n` uniformly centred patches; labels, if present, are ignored.
pub fn draw_unlabeled<T: Real>(cases: &[Case], n: usize, spec: &PatchSpec, rng: &mut impl Rng) -> Result<Vec<Volume3D<T>>> {
    if cases.is_empty() {
        return Err(Error::TooFew { what: "unlabeled cases", needed: 1, got: 0 });
    }
    let uniform = PatchSpec { size: spec.size, fg_ratio: 0.0 };
    Ok((0..n)
        .map(|_| {
            let case = &cases[rng.random_range(0..cases.len())];
            sample_patch(case, &uniform, rng).0.cast()
        })
        .collect())
}

/// Supervised pretraining of view `i` alone on `labeled`, with dropout active.
/// Returns the per-iteration batch loss.
pub fn pretrain_view<T: Real>(state: &mut TrainState<T>, i: usize, labeled: &[Case], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let model = &mut state.models[i];
    let opt = &mut state.optimizers[i];
    let mut losses = Vec::with_capacity(cfg.iters_stage1 as usize);
    for it in 0..cfg.iters_stage1 {
        let mut rng = stream(cfg.seed, Stream::Pretrain, &[i as u64, it]);
        let batch = draw_labeled::<T>(labeled, cfg.labeled_batch, &cfg.patch, &mut rng)?;
        let passes = batch
            .iter()
            .enumerate()
            .map(|(s, (x, _))| {
                let masks = (model.config().dropout_rate > 0.0)
                    .then(|| model.sample_masks(&mut stream(cfg.seed, Stream::Dropout, &[i as u64, it, s as u64, 1])));
                view_pass_masked(model, x, masks)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = vec![T::zero(); model.n_params()];
        let loss = supervised_grad(model, &batch, &passes, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter: it, diagnostic: format!("stage 1, view {i}, loss {loss}") });
        }
        opt.step(model.params_mut(), &grads);
        losses.push(loss);
    }
    Ok(losses)
}

/// Stage 1 for every view, each on its own labeled set (`labeled_per_view[i]`).
pub fn pretrain_views_on<T: Real>(
    state: &mut TrainState<T>,
    labeled_per_view: &[&[Case]],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<()> {
    let n = state.n_views();
    if labeled_per_view.len() != n {
        return Err(Error::shape("labeled sets per view", &[n], &[labeled_per_view.len()]));
    }
    state.reset_optimizers(cfg.lr_stage1, cfg);
    let snapshot = state.clone();
    let trained = crate::par::try_map_indexed(n, |i| {
        let mut s = snapshot.clone();
        let losses = pretrain_view(&mut s, i, labeled_per_view[i], cfg)?;
        Ok::<_, Error>((s.models.swap_remove(i), s.optimizers.swap_remove(i), losses))
    })?;
    let mut per_view_losses = Vec::with_capacity(n);
    for (i, (m, o, l)) in trained.into_iter().enumerate() {
        state.models[i] = m;
        state.optimizers[i] = o;
        per_view_losses.push(l);
    }
    for it in 0..cfg.iters_stage1 as usize {
        let mut row = MetricRow::new(it as u64, cfg.mode, 1, n);
        row.sup = per_view_losses.iter().map(|l| Some(l[it])).collect();
        row.total = Some(per_view_losses.iter().map(|l| l[it]).sum());
        log.push(row);
    }
    state.iter += cfg.iters_stage1;
    Ok(())
}

/// Stage 1: each view trained separately on the labeled set.
pub fn pretrain_views<T: Real>(split: &DatasetSplit, cfg: &TrainConfig, log: &mut MetricsLog) -> Result<TrainState<T>> {
    if split.mode == Mode::UdaNoSource {
        return Err(Error::invalid("mode", "UDA_NO_SOURCE starts from source checkpoints, not pretraining"));
    }
    if split.labeled.is_empty() {
        return Err(Error::TooFew { what: "labeled cases", needed: 1, got: 0 });
    }
    let mut state = TrainState::new(cfg)?;
    let sets = vec![split.labeled.as_slice(); state.n_views()];
    pretrain_views_on(&mut state, &sets, cfg, log)?;
    Ok(state)
}

/// Fixed central crops of the first `cfg.probe_cases` unlabeled cases.
pub fn probe_batch<T: Real>(split: &DatasetSplit, cfg: &TrainConfig) -> Vec<Volume3D<T>> {
    split
        .unlabeled
        .iter()
        .take(cfg.probe_cases)
        .map(|c| {
            let shape = c.shape();
            let corner = [0, 1, 2].map(|k| (shape[k] as isize - cfg.patch.size[k] as isize) / 2);
            let data = extract(shape, c.volume.data(), corner, cfg.patch.size);
            Volume3D::from_parts_unchecked(cfg.patch.size, data, c.volume.spacing, [0.0; 3]).cast()
        })
        .collect()
}

/// Mean pairwise foreground DSC between views' hard predictions on the probe batch.
pub fn inter_view_agreement<T: Real>(state: &TrainState<T>, probe: &[Volume3D<T>]) -> Result<f64> {
    let n = state.n_views();
    let (mut total, mut count) = (0.0, 0usize);
    for x in probe {
        let labels: Vec<LabelMap> = state
            .models
            .iter()
            .map(|m| Ok(view_pass(m, x)?.canon.argmax()))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..n {
            for j in i + 1..n {
                total += foreground_dsc(&labels[i], &labels[j])?;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Stage 2: `iters_stage2` co-training steps at `lr_stage2`.
///
/// In `UDA_NO_SOURCE` mode the labeled set is ignored and only the co-training
/// term is optimized.
pub fn cotrain<T: Real>(state: &mut TrainState<T>, split: &DatasetSplit, cfg: &TrainConfig, log: &mut MetricsLog) -> Result<()> {
    if split.unlabeled.is_empty() {
        return Err(Error::TooFew { what: "unlabeled cases", needed: 1, got: 0 });
    }
    let source_free = split.mode == Mode::UdaNoSource;
    if !source_free && split.labeled.is_empty() {
        return Err(Error::TooFew { what: "labeled cases", needed: 1, got: 0 });
    }
    state.reset_optimizers(cfg.lr_stage2, cfg);
    let n = state.n_views();
    let probe = probe_batch::<T>(split, cfg);
    for it in 0..cfg.iters_stage2 {
        let labeled = if source_free {
            Vec::new()
        } else {
            draw_labeled::<T>(&split.labeled, cfg.labeled_batch, &cfg.patch, &mut stream(cfg.seed, Stream::Labeled, &[it]))?
        };
        let unlabeled = draw_unlabeled::<T>(&split.unlabeled, cfg.unlabeled_batch, &cfg.patch, &mut stream(cfg.seed, Stream::Unlabeled, &[it]))?;
        let mut row = MetricRow::new(it, cfg.mode, 2, n);
        if it % cfg.probe_every == 0 && !probe.is_empty() {
            row.probe_dsc = Some(inter_view_agreement(state, &probe)?);
        }
        let out = cotrain_step(state, &labeled, &unlabeled, cfg)?;
        let r = &out.report;
        if !source_free {
            row.sup = r.per_view_supervised.iter().map(|&v| Some(v)).collect();
        }
        row.cot = r.per_view_cotraining.iter().map(|&v| Some(v)).collect();
        row.total = Some(r.total);
        if !out.uncertainty.is_empty() {
            row.uncertainty = out.uncertainty.iter().map(|&v| Some(v)).collect();
            row.confidence = out.confidence.iter().map(|&v| Some(v)).collect();
        }
        log.push(row);
    }
    Ok(())
}

/// Hard pseudo labels for every unlabeled case from the current model(s).
pub fn pseudo_label_cases<T: Real>(state: &TrainState<T>, cases: &[Case], window: &WindowSpec) -> Result<Vec<Case>> {
    cases
        .iter()
        .map(|c| {
            let preds = multi_view_predict(&state.models, &state.views, &c.volume.cast::<T>(), window)?;
            let label = crate::pipeline::ensemble(&preds, crate::pipeline::EnsembleMode::Average)?;
            Ok(Case { label: Some(label), ..c.clone() })
        })
        .collect()
}

/// Single-model self-training: regenerate hard pseudo labels on the unlabeled set
/// every `self_train_refresh` iterations and train on labels ∪ pseudo labels.
///
/// Returns how many times pseudo labels were generated.
pub fn self_train_baseline<T: Real>(state: &mut TrainState<T>, split: &DatasetSplit, cfg: &TrainConfig, log: &mut MetricsLog) -> Result<usize> {
    if state.n_views() != 1 {
        return Err(Error::invalid("self-training", format!("expects one model, got {}", state.n_views())));
    }
    if split.unlabeled.is_empty() {
        return Err(Error::TooFew { what: "unlabeled cases", needed: 1, got: 0 });
    }
    state.reset_optimizers(cfg.lr_stage2, cfg);
    let window = WindowSpec::half_overlap(cfg.patch.size);
    let mut pseudo: Vec<Case> = Vec::new();
    let mut refreshes = 0;
    for it in 0..cfg.iters_stage2 {
        if it % cfg.self_train_refresh == 0 {
            pseudo = pseudo_label_cases(state, &split.unlabeled, &window)?;
            refreshes += 1;
        }
        let labeled = if split.labeled.is_empty() {
            Vec::new()
        } else {
            draw_labeled::<T>(&split.labeled, cfg.labeled_batch, &cfg.patch, &mut stream(cfg.seed, Stream::Labeled, &[it]))?
        };
        let pl = draw_labeled::<T>(&pseudo, cfg.unlabeled_batch, &cfg.patch, &mut stream(cfg.seed, Stream::SelfTrain, &[it]))?;
        let m = &state.models[0];
        let total_n = (labeled.len() + pl.len()) as f64;
        let mut grads = vec![T::zero(); m.n_params()];
        let mut part = |batch: &[LabeledPatch<T>]| -> Result<f64> {
            let mut sum = 0.0;
            for (x, y) in batch {
                let pass = view_pass(m, x)?;
                let (l, g) = dice_loss_grad(&pass.canon, &one_hot::<T>(y), DEFAULT_SMOOTH)?;
                sum += l;
                backprop(m, &pass, &g, 1.0 / total_n, &mut grads);
            }
            Ok(sum)
        };
        let sup_sum = part(&labeled)?;
        let pl_sum = part(&pl)?;
        let total = (sup_sum + pl_sum) / total_n;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iter: it, diagnostic: format!("self-training loss {total}") });
        }
        state.optimizers[0].step(state.models[0].params_mut(), &grads);
        state.iter += 1;
        let mut row = MetricRow::new(it, cfg.mode, 2, 1);
        if !labeled.is_empty() {
            row.sup = vec![Some(sup_sum / labeled.len() as f64)];
        }
        row.cot = vec![Some(pl_sum / pl.len().max(1) as f64)];
        row.total = Some(total);
        log.push(row);
    }
    Ok(refreshes)
}
