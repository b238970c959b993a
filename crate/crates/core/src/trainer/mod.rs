//! Two-stage training: per-view supervised pretraining, then uncertainty-aware
//! co-training, plus the supervised-only, source-free and self-training modes.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod log;
pub mod rng;
pub mod schedule;
pub mod step;

pub use config::{FusionKind, TrainConfig};
pub use eval::{evaluate, EvalSummary, Evaluation};
pub use experiment::{
    build_data, run_experiment, run_in_memory, DataSpec, EvalSpec, ExperimentArtifacts, ExperimentConfig, ExperimentData,
    RunManifest, RunSummary,
};
pub use log::{MetricRow, MetricsLog};
pub use schedule::{cotrain, pretrain_views, pretrain_views_on, self_train_baseline};
pub use step::{cotrain_step, supervised_step, LabeledPatch, StepOutcome, TrainState};
