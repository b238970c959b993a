//! End-to-end runs: data, training in the configured mode, evaluation and artifacts.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::container::{read_case, write_case};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, ViewModel};
use crate::pipeline::{preprocess, WindowSpec};
use crate::synth::{generate_dataset, shift_domain, DomainShift, PhantomRecipe};
use crate::views::{standard_view_set, ViewSet};
use crate::volume::{Case, DatasetSplit, Mode, Shape3};

use super::config::TrainConfig;
use super::eval::{evaluate, EvalSummary};
use super::log::MetricsLog;
use super::rng::{stream_seed, Stream};
use super::schedule::{cotrain, pretrain_views, self_train_baseline};
use super::step::TrainState;

/// Where cases come from and how they are split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub recipe: PhantomRecipe,
    /// A dataset written by `synth-data`; replaces generation from `recipe`.
    pub dir: Option<PathBuf>,
    /// Seed of the first generated case.
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    /// Unlabeled and test cases come from the shifted recipe when set.
    pub target_shift: Option<DomainShift>,
    pub spacing_mm: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            recipe: PhantomRecipe::default(),
            dir: None,
            seed: 0,
            n_labeled: 4,
            n_unlabeled: 36,
            n_test: 10,
            target_shift: None,
            spacing_mm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Sliding-window stride; half the patch when unset.
    pub stride: Option<Shape3>,
    /// Also evaluate the models as they stand before stage 2.
    pub before_stage2: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec { stride: None, before_stage2: true }
    }
}

impl EvalSpec {
    pub fn window(&self, patch: Shape3) -> WindowSpec {
        let mut w = WindowSpec::half_overlap(patch);
        if let Some(s) = self.stride {
            w.stride = s;
        }
        w
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.recipe.validate()?;
        self.eval.window(self.train.patch.size).validate()?;
        if self.data.n_test == 0 {
            return Err(Error::invalid("data", "n_test must be positive"));
        }
        if self.data.spacing_mm <= 0.0 {
            return Err(Error::invalid("data", "spacing_mm must be positive"));
        }
        if self.data.dir.is_some() && self.data.target_shift.is_some() {
            return Err(Error::invalid("data", "target_shift applies to generated data only"));
        }
        if self.train.mode == Mode::SelfTrain && self.train.n_views != 1 {
            return Err(Error::invalid("train", "SELF_TRAIN trains a single view; set n_views = 1"));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        crate::config::config_hash(self)
    }
}

/// Case list written next to generated cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub recipe: PhantomRecipe,
    pub seed: u64,
    pub case_ids: Vec<String>,
    pub domain_tag: String,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

pub fn write_dataset(dir: &Path, cases: &[Case], recipe: &PhantomRecipe, seed: u64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    for c in cases {
        write_case(dir, c)?;
    }
    let manifest = DatasetManifest {
        recipe: recipe.clone(),
        seed,
        case_ids: cases.iter().map(|c| c.id.clone()).collect(),
        domain_tag: cases.first().map(|c| c.domain_tag.clone()).unwrap_or_default(),
    };
    std::fs::write(dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Case>> {
    let path = dir.join(DATASET_MANIFEST);
    let text = std::fs::read_to_string(&path)?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format { path, reason: e.to_string() })?;
    m.case_ids.iter().map(|id| read_case(dir, id, &m.domain_tag)).collect()
}

/// Training split plus held-out labeled test cases, preprocessed.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub split: DatasetSplit,
    pub test: Vec<Case>,
}

fn strip(mut c: Case) -> Case {
    c.label = None;
    c
}

pub fn build_data(spec: &DataSpec, mode: Mode) -> Result<ExperimentData> {
    let (labeled, unlabeled, test) = match &spec.dir {
        Some(dir) => {
            let mut all = read_dataset(dir)?;
            let need = spec.n_labeled + spec.n_unlabeled + spec.n_test;
            if all.len() < need {
                return Err(Error::TooFew { what: "cases in dataset", needed: need, got: all.len() });
            }
            let test = all.split_off(spec.n_labeled + spec.n_unlabeled);
            let unlabeled = all.split_off(spec.n_labeled);
            (all, unlabeled, test[..spec.n_test].to_vec())
        }
        None => {
            let target = match &spec.target_shift {
                Some(s) => shift_domain(&spec.recipe, s)?,
                None => spec.recipe.clone(),
            };
            let gen = |n: usize, r: &PhantomRecipe, seed: u64| if n == 0 { Ok(Vec::new()) } else { generate_dataset(n, r, seed) };
            let l = gen(spec.n_labeled, &spec.recipe, spec.seed)?;
            let u = gen(spec.n_unlabeled, &target, spec.seed + spec.n_labeled as u64)?;
            let t = gen(spec.n_test, &target, spec.seed + (spec.n_labeled + spec.n_unlabeled) as u64)?;
            (l, u, t)
        }
    };
    let prep = |cases: Vec<Case>| -> Result<Vec<Case>> { cases.iter().map(|c| preprocess(c, spec.spacing_mm)).collect() };
    let labeled = if mode == Mode::UdaNoSource { Vec::new() } else { prep(labeled)? };
    let unlabeled = prep(unlabeled)?.into_iter().map(strip).collect();
    let test = prep(test)?;
    Ok(ExperimentData { split: DatasetSplit::new(labeled, unlabeled, mode)?, test })
}

/// View models for source-free adaptation: one checkpoint per view, or one
/// checkpoint replicated to every view with its own dropout stream.
pub fn load_source_models(paths: &[PathBuf], cfg: &TrainConfig) -> Result<(ViewSet, Vec<ViewModel<f32>>)> {
    let ckpts = paths.iter().map(|p| checkpoint::load::<f32>(p)).collect::<Result<Vec<_>>>()?;
    let views = standard_view_set(cfg.n_views)?;
    let models = if ckpts.len() == 1 {
        let src = &ckpts[0].model;
        views
            .transforms()
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                ViewModel::from_params(src.config(), t, src.params().to_vec(), stream_seed(cfg.seed, Stream::Dropout, &[i as u64]))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        if ckpts.len() != views.len() {
            return Err(Error::shape("source checkpoints", &[views.len()], &[ckpts.len()]));
        }
        for (c, &t) in ckpts.iter().zip(views.transforms()) {
            if c.model.view() != t {
                return Err(Error::invalid(
                    "source checkpoint",
                    format!("view {} where {} was expected", c.model.view(), t),
                ));
            }
        }
        ckpts.into_iter().map(|c| c.model).collect()
    };
    if let Some(m) = models.first() {
        if m.config() != &cfg.model {
            return Err(Error::HashMismatch {
                expected: checkpoint::config_hash(&cfg.model),
                found: checkpoint::config_hash(m.config()),
            });
        }
    }
    Ok((views, models))
}

/// Everything a run produces in memory.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: TrainState<f32>,
    pub log: MetricsLog,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub mode: Mode,
    pub views: Vec<String>,
    /// Models after stage 1 (or the source models under source-free adaptation).
    pub before_stage2: Option<EvalSummary>,
    pub result: EvalSummary,
    pub pseudo_label_refreshes: Option<usize>,
}

/// Runs the configured mode in memory. On failure the metrics logged so far are
/// returned alongside the error.
pub fn run_in_memory(cfg: &ExperimentConfig, data: &ExperimentData) -> std::result::Result<RunOutput, (Error, MetricsLog)> {
    let tc = &cfg.train;
    let window = cfg.eval.window(tc.patch.size);
    let mut log = MetricsLog::new(tc.n_views);
    macro_rules! tri {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => return Err((e, log)),
            }
        };
    }
    let hash = tri!(cfg.hash());
    let mut state = match tc.mode {
        Mode::UdaNoSource => {
            let (views, models) = tri!(load_source_models(&tc.source_checkpoints, tc));
            TrainState::from_models(views, models, tc.lr_stage2, tc)
        }
        _ => tri!(pretrain_views::<f32>(&data.split, tc, &mut log)),
    };
    let evaluate_now = |s: &TrainState<f32>| evaluate(&s.models, &s.views, &data.test, &window).map(|e| e.summary());
    let before = if cfg.eval.before_stage2 && tc.mode != Mode::SupervisedOnly {
        Some(tri!(evaluate_now(&state)))
    } else {
        None
    };
    let mut refreshes = None;
    match tc.mode {
        Mode::SupervisedOnly => {}
        Mode::SelfTrain => refreshes = Some(tri!(self_train_baseline(&mut state, &data.split, tc, &mut log))),
        Mode::Ssl | Mode::Uda | Mode::UdaNoSource => tri!(cotrain(&mut state, &data.split, tc, &mut log)),
    }
    let result = tri!(evaluate_now(&state));
    let summary = RunSummary {
        config_hash: hash,
        mode: tc.mode,
        views: state.views.transforms().iter().map(|t| t.token()).collect(),
        before_stage2: before,
        result,
        pseudo_label_refreshes: refreshes,
    };
    Ok(RunOutput { state, log, summary })
}

/// Provenance record of one run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub source_revision: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub mode: Mode,
    pub status: String,
    pub artifacts: Vec<String>,
}

pub fn source_revision() -> String {
    match option_env!("UMCT_SOURCE_REV") {
        Some(rev) => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Clone, Debug)]
pub struct ExperimentArtifacts {
    pub run_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub manifest_json: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub summary: RunSummary,
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const CONFIG_JSON: &str = "config.json";

/// Run directory for a config: `<root>/<first 16 hex chars of its hash>`.
pub fn run_dir(root: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    Ok(root.join(&cfg.hash()?[..16]))
}

/// Validates, builds data, trains, evaluates and writes every artifact under the
/// run directory. An existing run directory is an error unless `force`.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path, force: bool) -> Result<ExperimentArtifacts> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let dir = run_dir(root, cfg)?;
    if dir.exists() {
        if !force {
            return Err(Error::RunExists(dir));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let started = now();
    std::fs::write(dir.join(CONFIG_JSON), crate::config::canonical_json(cfg)? + "\n")?;

    let outcome = build_data(&cfg.data, cfg.train.mode)
        .map_err(|e| (e, MetricsLog::new(cfg.train.n_views)))
        .and_then(|data| run_in_memory(cfg, &data));
    let mut manifest = RunManifest {
        config: serde_json::to_value(cfg)?,
        config_hash: hash,
        source_revision: source_revision(),
        started_unix: started,
        finished_unix: 0,
        mode: cfg.train.mode,
        status: String::new(),
        artifacts: vec![CONFIG_JSON.into(), METRICS_CSV.into()],
    };
    let metrics_csv = dir.join(METRICS_CSV);
    let manifest_json = dir.join(MANIFEST_JSON);
    let out = match outcome {
        Ok(out) => out,
        Err((e, log)) => {
            log.write_csv(&metrics_csv)?;
            std::fs::write(dir.join("error.txt"), format!("{e}\n"))?;
            manifest.status = "failed".into();
            manifest.finished_unix = now();
            manifest.artifacts.push("error.txt".into());
            std::fs::write(&manifest_json, serde_json::to_string_pretty(&manifest)? + "\n")?;
            return Err(e);
        }
    };
    out.log.write_csv(&metrics_csv)?;
    let mut checkpoints = Vec::new();
    for (i, (m, o)) in out.state.models.iter().zip(&out.state.optimizers).enumerate() {
        let name = format!("view{i}.ckpt");
        let path = dir.join(&name);
        checkpoint::save(&path, m, Some(o), &manifest.config_hash)?;
        manifest.artifacts.push(name);
        checkpoints.push(path);
    }
    let summary_json = dir.join(SUMMARY_JSON);
    std::fs::write(&summary_json, serde_json::to_string_pretty(&out.summary)? + "\n")?;
    manifest.artifacts.push(SUMMARY_JSON.into());
    manifest.status = "complete".into();
    manifest.finished_unix = now();
    std::fs::write(&manifest_json, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(ExperimentArtifacts { run_dir: dir, metrics_csv, summary_json, manifest_json, checkpoints, summary: out.summary })
}
