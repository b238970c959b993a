//! Desk-scale synthetic experiments comparing co-training against baselines.
//!
//! Each driver runs one seed and returns the numbers its comparison needs; the
//! acceptance suite and the `ablate` command aggregate them over seeds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::SegModelConfig;
use crate::pipeline::PatchSpec;
use crate::synth::{DomainShift, PhantomRecipe};
use crate::volume::{Case, DatasetSplit, LabelMap, Mode};

use super::config::{FusionKind, TrainConfig};
use super::eval::evaluate;
use super::experiment::{build_data, DataSpec, EvalSpec, ExperimentConfig};
use super::log::MetricsLog;
use super::rng::{stream, Stream};
use super::schedule::{cotrain, pretrain_views_on, self_train_baseline};
use super::step::TrainState;

/// Size knobs shared by every experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scale {
    pub recipe: PhantomRecipe,
    pub patch: usize,
    pub base_width: usize,
    pub depth: usize,
    pub labeled_batch: usize,
    pub iters_stage1: u64,
    pub iters_stage2: u64,
    pub lr_stage2: f64,
    pub mc_samples: usize,
    pub n_test: usize,
    /// Target domain of the shift suite.
    pub shift: DomainShift,
}

impl Default for Scale {
    fn default() -> Self {
        Scale {
            recipe: PhantomRecipe {
                noise_std: 0.3,
                class_intensity: vec![[0.2, 0.0], [0.5, 0.05]],
                intensity_jitter: 0.1,
                ..PhantomRecipe::default()
            },
            patch: 16,
            base_width: 8,
            depth: 2,
            labeled_batch: 1,
            iters_stage1: 900,
            iters_stage2: 300,
            lr_stage2: 1e-3,
            mc_samples: 10,
            n_test: 10,
            shift: DomainShift { gamma_delta: 2.0, noise_delta: 0.0, lesion_prob_delta: 0.8 },
        }
    }
}

impl Scale {
    /// Experiment config for `mode` at this scale; data counts are set by callers.
    pub fn config(&self, mode: Mode, seed: u64) -> ExperimentConfig {
        let train = TrainConfig {
            mode,
            n_views: 3,
            mc_samples: self.mc_samples,
            labeled_batch: self.labeled_batch,
            unlabeled_batch: 4 * self.labeled_batch,
            iters_stage1: self.iters_stage1,
            iters_stage2: self.iters_stage2,
            lr_stage2: self.lr_stage2,
            patch: PatchSpec { size: [self.patch; 3], fg_ratio: 0.5 },
            model: SegModelConfig { base_width: self.base_width, depth: self.depth, ..SegModelConfig::default() },
            seed,
            ..TrainConfig::default()
        };
        let data = DataSpec {
            recipe: self.recipe.clone(),
            seed: seed * 1000,
            n_test: self.n_test,
            ..DataSpec::default()
        };
        ExperimentConfig { train, data, eval: EvalSpec { stride: None, before_stage2: true } }
    }
}

fn eval_dsc(state: &TrainState<f32>, test: &[Case], cfg: &ExperimentConfig) -> Result<(Vec<f64>, f64)> {
    let s = evaluate(&state.models, &state.views, test, &cfg.eval.window(cfg.train.patch.size))?.summary();
    Ok((s.per_view_dsc, s.ensemble_dsc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslOutcome {
    pub seed: u64,
    /// Axial view after supervised pretraining.
    pub supervised_dsc: f64,
    pub umct_dsc: f64,
    pub umct_per_view_dsc: Vec<f64>,
    pub metrics_csv: String,
}

/// 40 phantoms, 10% labeled: single-view supervised vs 3-view co-training ensemble.
pub fn ssl_analog(scale: &Scale, seed: u64) -> Result<SslOutcome> {
    let mut cfg = scale.config(Mode::Ssl, seed);
    cfg.data.n_labeled = 4;
    cfg.data.n_unlabeled = 36;
    let data = build_data(&cfg.data, Mode::Ssl)?;
    let mut log = MetricsLog::new(3);
    let mut state = TrainState::new(&cfg.train)?;
    pretrain_views_on(&mut state, &[data.split.labeled.as_slice(); 3], &cfg.train, &mut log)?;
    let (before, _) = eval_dsc(&state, &data.test, &cfg)?;
    cotrain(&mut state, &data.split, &cfg.train, &mut log)?;
    let (per_view, ens) = eval_dsc(&state, &data.test, &cfg)?;
    Ok(SslOutcome { seed, supervised_dsc: before[0], umct_dsc: ens, umct_per_view_dsc: per_view, metrics_csv: log.to_csv() })
}

/// Inverts foreground and background inside a random `fraction` of the
/// `block³` tiles of a two-class label map (other classes map to background).
///
/// Spatially coherent errors cannot be absorbed as a constant bias the way
/// independent voxel flips can.
pub fn corrupt_label_blocks(label: &LabelMap, fraction: f64, block: usize, rng: &mut impl Rng) -> LabelMap {
    let s = label.shape();
    let mut data = label.data().to_vec();
    for bz in (0..s[0]).step_by(block) {
        for by in (0..s[1]).step_by(block) {
            for bx in (0..s[2]).step_by(block) {
                if rng.random::<f64>() >= fraction {
                    continue;
                }
                for z in bz..(bz + block).min(s[0]) {
                    for y in by..(by + block).min(s[1]) {
                        for x in bx..(bx + block).min(s[2]) {
                            let i = (z * s[1] + y) * s[2] + x;
                            data[i] = (data[i] == 0) as u8;
                        }
                    }
                }
            }
        }
    }
    LabelMap::from_parts_unchecked(s, data, label.n_classes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UlfOutcome {
    pub seed: u64,
    pub corrupted_view: usize,
    pub ulf_dsc: f64,
    pub uniform_dsc: f64,
    /// Per-view DSC after stage 1 and after co-training under each fusion.
    pub pretrained_per_view_dsc: Vec<f64>,
    pub ulf_per_view_dsc: Vec<f64>,
    pub uniform_per_view_dsc: Vec<f64>,
    /// Share of co-training iterations in which the corrupted view had the lowest confidence.
    pub lowest_confidence_share: f64,
}

/// One view pretrained on 30% label-corrupted data; co-training with
/// uncertainty-weighted fusion vs uniform fusion from the same starting point.
pub fn ulf_analog(scale: &Scale, seed: u64) -> Result<UlfOutcome> {
    let corrupted_view = 2;
    let mut cfg = scale.config(Mode::Ssl, seed);
    cfg.data.n_labeled = 4;
    cfg.data.n_unlabeled = 36;
    let data = build_data(&cfg.data, Mode::Ssl)?;
    let mut rng = stream(seed, Stream::Labeled, &[u64::MAX]);
    let noisy: Vec<Case> = data
        .split
        .labeled
        .iter()
        .map(|c| Case { label: c.label.as_ref().map(|l| corrupt_label_blocks(l, 0.3, 8, &mut rng)), ..c.clone() })
        .collect();
    let mut sets: Vec<&[Case]> = vec![data.split.labeled.as_slice(); 3];
    sets[corrupted_view] = &noisy;
    let mut log = MetricsLog::new(3);
    let mut start = TrainState::new(&cfg.train)?;
    pretrain_views_on(&mut start, &sets, &cfg.train, &mut log)?;

    let (pretrained_per_view_dsc, _) = eval_dsc(&start, &data.test, &cfg)?;

    let run = |fusion: FusionKind| -> Result<(Vec<f64>, f64, MetricsLog)> {
        let mut tc = cfg.train.clone();
        tc.fusion = fusion;
        let mut state = start.clone();
        let mut log = MetricsLog::new(3);
        cotrain(&mut state, &data.split, &tc, &mut log)?;
        let (per_view, ens) = eval_dsc(&state, &data.test, &cfg)?;
        Ok((per_view, ens, log))
    };
    let (ulf_per_view_dsc, ulf_dsc, ulf_log) = run(FusionKind::Uncertainty)?;
    let (uniform_per_view_dsc, uniform_dsc, _) = run(FusionKind::Uniform)?;
    let rows: Vec<_> = ulf_log.stage(2).collect();
    let lowest = rows
        .iter()
        .filter(|r| {
            let c: Vec<f64> = r.confidence.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
            c.iter().enumerate().all(|(i, &v)| i == corrupted_view || v > c[corrupted_view])
        })
        .count();
    Ok(UlfOutcome {
        seed,
        corrupted_view,
        ulf_dsc,
        uniform_dsc,
        pretrained_per_view_dsc,
        ulf_per_view_dsc,
        uniform_per_view_dsc,
        lowest_confidence_share: lowest as f64 / rows.len().max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftOutcome {
    pub seed: u64,
    /// Source models evaluated on the shifted target.
    pub direct_dsc: f64,
    /// After source-free adaptation on the shifted target.
    pub adapted_dsc: f64,
    /// No-shift control: source models and adapted models on source-distributed targets.
    pub control_source_dsc: f64,
    pub control_adapted_dsc: f64,
    /// Co-training with source labels and target unlabeled data.
    pub umct_dsc: f64,
    /// Single-view self-training with source labels and target pseudo labels.
    pub self_train_dsc: f64,
}

/// Source models and the target/control data shared by the shift experiments.
#[derive(Clone, Debug)]
pub struct ShiftSetup {
    pub seed: u64,
    pub cfg: ExperimentConfig,
    pub target: super::experiment::ExperimentData,
    pub control: super::experiment::ExperimentData,
    pub source: TrainState<f32>,
}

/// Pretrains source models on unshifted labeled cases.
pub fn shift_setup(scale: &Scale, seed: u64) -> Result<ShiftSetup> {
    let mut cfg = scale.config(Mode::UdaNoSource, seed);
    cfg.data.n_labeled = 20;
    cfg.data.n_unlabeled = 20;
    let mut shifted = cfg.data.clone();
    shifted.target_shift = Some(scale.shift);
    let target = build_data(&shifted, Mode::Uda)?;
    let control = build_data(&cfg.data, Mode::Uda)?;
    let mut source = TrainState::new(&cfg.train)?;
    pretrain_views_on(&mut source, &[target.split.labeled.as_slice(); 3], &cfg.train, &mut MetricsLog::new(3))?;
    Ok(ShiftSetup { seed, cfg, target, control, source })
}

/// Source-free adaptation on the shifted target and on the no-shift control.
/// Returns `(direct, adapted, control_source, control_adapted)` ensemble DSC.
pub fn adaptation_runs(setup: &ShiftSetup) -> Result<(f64, f64, f64, f64)> {
    let adapt = |data: &super::experiment::ExperimentData| -> Result<(f64, f64)> {
        let before = eval_dsc(&setup.source, &data.test, &setup.cfg)?.1;
        let split = DatasetSplit::new(Vec::new(), data.split.unlabeled.clone(), Mode::UdaNoSource)?;
        let mut state = setup.source.clone();
        cotrain(&mut state, &split, &setup.cfg.train, &mut MetricsLog::new(3))?;
        Ok((before, eval_dsc(&state, &data.test, &setup.cfg)?.1))
    };
    let (direct, adapted) = adapt(&setup.target)?;
    let (control_source, control_adapted) = adapt(&setup.control)?;
    Ok((direct, adapted, control_source, control_adapted))
}

/// Co-training vs single-view self-training on the shifted target, both with
/// source labels. Returns `(umct, self_train)` DSC.
pub fn ordering_runs(setup: &ShiftSetup) -> Result<(f64, f64)> {
    let (cfg, target) = (&setup.cfg, &setup.target);
    let mut uda = cfg.train.clone();
    uda.mode = Mode::Uda;
    let mut umct = setup.source.clone();
    cotrain(&mut umct, &target.split, &uda, &mut MetricsLog::new(3))?;
    let umct_dsc = eval_dsc(&umct, &target.test, cfg)?.1;

    let mut st_cfg = uda.clone();
    st_cfg.mode = Mode::SelfTrain;
    st_cfg.self_train_refresh = (st_cfg.iters_stage2 / 3).max(1);
    let views = crate::views::ViewSet::new(vec![setup.source.views.get(0)], vec!["axial".into()])?;
    let mut single = TrainState::from_models(views, vec![setup.source.models[0].clone()], st_cfg.lr_stage2, &st_cfg);
    self_train_baseline(&mut single, &target.split, &st_cfg, &mut MetricsLog::new(1))?;
    Ok((umct_dsc, eval_dsc(&single, &target.test, cfg)?.1))
}

/// Source pretraining, then on a gamma+lesion-shifted target: direct transfer,
/// source-free co-training adaptation, a no-shift control, and co-training vs
/// self-training with source labels available.
pub fn shift_suite(scale: &Scale, seed: u64) -> Result<ShiftOutcome> {
    let setup = shift_setup(scale, seed)?;
    let (direct_dsc, adapted_dsc, control_source_dsc, control_adapted_dsc) = adaptation_runs(&setup)?;
    let (umct_dsc, self_train_dsc) = ordering_runs(&setup)?;
    Ok(ShiftOutcome { seed, direct_dsc, adapted_dsc, control_source_dsc, control_adapted_dsc, umct_dsc, self_train_dsc })
}

/// Pass/fail outcome of one comparison aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn count_verdict(name: &str, hits: usize, n: usize, needed: usize, what: &str) -> Verdict {
    Verdict { name: name.into(), passed: hits >= needed, detail: format!("{what} in {hits}/{n} seeds (need {needed})") }
}

/// Co-training ensemble beats the supervised single view by at least 2 DSC points in 4 of 5 seeds.
pub fn ssl_verdict(runs: &[SslOutcome]) -> Verdict {
    let hits = runs.iter().filter(|o| o.umct_dsc - o.supervised_dsc >= 0.02).count();
    count_verdict("ssl", hits, runs.len(), needed(runs.len(), 4), "gain >= 2 points")
}

/// Uncertainty fusion at least matches uniform fusion in 4 of 5 seeds, and the
/// corrupted view has the lowest confidence in at least 80% of the pooled iterations.
pub fn ulf_verdict(runs: &[UlfOutcome]) -> Verdict {
    let hits = runs.iter().filter(|o| o.ulf_dsc >= o.uniform_dsc).count();
    let share = runs.iter().map(|o| o.lowest_confidence_share).sum::<f64>() / runs.len().max(1) as f64;
    let mut v = count_verdict("ulf", hits, runs.len(), needed(runs.len(), 4), "ulf >= uniform");
    v.passed &= share >= 0.8;
    v.detail.push_str(&format!("; corrupted view least confident in {:.1}% of iterations (need 80%)", 100.0 * share));
    v
}

/// Source-free adaptation beats direct transfer in 4 of 5 seeds and the
/// no-shift control loses at most 2 points in every seed.
pub fn adaptation_verdict(runs: &[ShiftOutcome]) -> Verdict {
    let hits = runs.iter().filter(|o| o.adapted_dsc > o.direct_dsc).count();
    let worst = runs.iter().map(|o| o.control_source_dsc - o.control_adapted_dsc).fold(f64::NEG_INFINITY, f64::max);
    let mut v = count_verdict("uda_no_source", hits, runs.len(), needed(runs.len(), 4), "adapted > direct");
    v.passed &= worst <= 0.02;
    v.detail.push_str(&format!("; worst control loss {:.2} points (max 2)", 100.0 * worst));
    v
}

/// Co-training at least matches self-training in 3 of 5 seeds.
pub fn ordering_verdict(runs: &[ShiftOutcome]) -> Verdict {
    let hits = runs.iter().filter(|o| o.umct_dsc >= o.self_train_dsc).count();
    count_verdict("umct_vs_self_train", hits, runs.len(), needed(runs.len(), 3), "umct >= self-training")
}

/// Scales a "k of 5 seeds" requirement to `n` seeds, rounding up.
fn needed(n: usize, of_five: usize) -> usize {
    (n * of_five).div_ceil(5)
}
