use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SegModelConfig;
use crate::pipeline::PatchSpec;
use crate::volume::Mode;

/// How pseudo labels are fused from the other views.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Confidence-weighted by inverse MC-dropout variance.
    #[default]
    Uncertainty,
    /// Plain average of the other views.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub n_views: usize,
    pub lambda_cot: f64,
    /// MC dropout samples per view per unlabeled patch.
    pub mc_samples: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iters_stage1: u64,
    pub iters_stage2: u64,
    pub patch: PatchSpec,
    pub model: SegModelConfig,
    pub seed: u64,
    pub self_train_refresh: u64,
    pub fusion: FusionKind,
    pub confidence_eps: f64,
    /// Inter-view agreement on the probe batch is logged every this many iterations.
    pub probe_every: u64,
    pub probe_cases: usize,
    /// Per-view source checkpoints for `UDA_NO_SOURCE`; a single entry is replicated.
    pub source_checkpoints: Vec<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Ssl,
            n_views: 3,
            lambda_cot: 0.2,
            mc_samples: 10,
            labeled_batch: 4,
            unlabeled_batch: 16,
            lr_stage1: 7e-3,
            lr_stage2: 1e-3,
            momentum: 0.9,
            weight_decay: 4e-5,
            iters_stage1: 2000,
            iters_stage2: 1000,
            patch: PatchSpec::default(),
            model: SegModelConfig::default(),
            seed: 0,
            self_train_refresh: 1000,
            fusion: FusionKind::Uncertainty,
            confidence_eps: crate::uncertainty::DEFAULT_EPS,
            probe_every: 100,
            probe_cases: 2,
            source_checkpoints: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.patch.validate(self.model.divisor())?;
        let bad = |r: String| Err(Error::invalid("train config", r));
        if ![2, 3, 6].contains(&self.n_views) && !(self.n_views == 1 && matches!(self.mode, Mode::SupervisedOnly | Mode::SelfTrain)) {
            return Err(Error::UnsupportedViewCount(self.n_views));
        }
        if !(self.lambda_cot >= 0.0 && self.lambda_cot.is_finite()) {
            return bad(format!("lambda_cot {} must be finite and >= 0", self.lambda_cot));
        }
        if self.mc_samples < 2 && self.fusion == FusionKind::Uncertainty {
            return bad(format!("mc_samples {} < 2", self.mc_samples));
        }
        if self.labeled_batch == 0 && self.mode != Mode::UdaNoSource {
            return bad("labeled_batch must be positive".into());
        }
        if self.unlabeled_batch == 0 && !matches!(self.mode, Mode::SupervisedOnly) {
            return bad("unlabeled_batch must be positive".into());
        }
        for (name, v) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if self.confidence_eps <= 0.0 {
            return bad("confidence_eps must be positive".into());
        }
        if self.self_train_refresh == 0 || self.probe_every == 0 {
            return bad("self_train_refresh and probe_every must be positive".into());
        }
        if self.mode == Mode::UdaNoSource && self.source_checkpoints.is_empty() {
            return bad("UDA_NO_SOURCE needs source_checkpoints".into());
        }
        if self.labeled_batch > 0 && self.unlabeled_batch > 0 && self.unlabeled_batch != 4 * self.labeled_batch {
            log::warn!(
                "labeled:unlabeled batch ratio is {}:{}, not 1:4",
                self.labeled_batch,
                self.unlabeled_batch
            );
        }
        Ok(())
    }
}
