//! Training loop contracts on tiny configurations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umct::nn::SegModelConfig;
use umct::pipeline::PatchSpec;
use umct::synth::PhantomRecipe;
use umct::trainer::experiment::{build_data, run_in_memory, DataSpec, EvalSpec};
use umct::Error;
use umct::trainer::schedule::{draw_labeled, draw_unlabeled};
use umct::trainer::{
    cotrain, cotrain_step, pretrain_views, run_experiment, self_train_baseline, supervised_step, ExperimentConfig,
    MetricsLog, TrainConfig, TrainState,
};
use umct::{DatasetSplit, Mode};

fn recipe() -> PhantomRecipe {
    PhantomRecipe { shape: [16; 3], blob_radius: [3.0, 5.0], ..PhantomRecipe::default() }
}

fn train_cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        n_views: 3,
        mc_samples: 3,
        labeled_batch: 1,
        unlabeled_batch: 4,
        iters_stage1: 6,
        iters_stage2: 4,
        patch: PatchSpec { size: [8; 3], fg_ratio: 0.5 },
        model: SegModelConfig { base_width: 2, depth: 2, ..SegModelConfig::default() },
        probe_every: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn exp_cfg(mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        train: train_cfg(mode),
        data: DataSpec { recipe: recipe(), seed: 40, n_labeled: 2, n_unlabeled: 4, n_test: 2, ..DataSpec::default() },
        eval: EvalSpec::default(),
    }
}

fn split(mode: Mode) -> DatasetSplit {
    build_data(&exp_cfg(mode).data, mode).unwrap().split
}

#[test]
fn zero_pretraining_iterations_is_fresh_init() {
    let mut cfg = train_cfg(Mode::Ssl);
    cfg.iters_stage1 = 0;
    let state = pretrain_views::<f32>(&split(Mode::Ssl), &cfg, &mut MetricsLog::new(3)).unwrap();
    let fresh = TrainState::<f32>::new(&cfg).unwrap();
    for (a, b) in state.models.iter().zip(&fresh.models) {
        assert_eq!(a.params(), b.params());
    }
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let mut cfg = train_cfg(Mode::SupervisedOnly);
    cfg.n_views = 1;
    cfg.model.base_width = 4;
    let s = split(Mode::SupervisedOnly);
    let batch = draw_labeled::<f32>(&s.labeled, 2, &cfg.patch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut state = TrainState::<f32>::new(&cfg).unwrap();
    let first = supervised_step(&mut state, &batch).unwrap().total;
    let mut last = first;
    for _ in 0..199 {
        last = supervised_step(&mut state, &batch).unwrap().total;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn zero_lambda_step_equals_supervised_step() {
    let mut cfg = train_cfg(Mode::Ssl);
    cfg.lambda_cot = 0.0;
    let s = split(Mode::Ssl);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labeled = draw_labeled::<f64>(&s.labeled, 2, &cfg.patch, &mut rng).unwrap();
    let unlabeled = draw_unlabeled::<f64>(&s.unlabeled, 4, &cfg.patch, &mut rng).unwrap();
    let start = TrainState::<f64>::new(&cfg).unwrap();
    let (mut a, mut b) = (start.clone(), start);
    cotrain_step(&mut a, &labeled, &unlabeled, &cfg).unwrap();
    supervised_step(&mut b, &labeled).unwrap();
    for (ma, mb) in a.models.iter().zip(&b.models) {
        for (x, y) in ma.params().iter().zip(mb.params()) {
            assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn pseudo_labels_exclude_their_own_view() {
    let cfg = train_cfg(Mode::Ssl);
    let s = split(Mode::Ssl);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labeled = draw_labeled::<f32>(&s.labeled, 1, &cfg.patch, &mut rng).unwrap();
    let unlabeled = draw_unlabeled::<f32>(&s.unlabeled, 4, &cfg.patch, &mut rng).unwrap();
    let mut state = TrainState::<f32>::new(&cfg).unwrap();
    let out = cotrain_step(&mut state, &labeled, &unlabeled, &cfg).unwrap();
    assert_eq!(out.pseudo_labels.len(), 4);
    for per_sample in &out.pseudo_labels {
        assert_eq!(per_sample.len(), 3);
        for (i, pl) in per_sample.iter().enumerate() {
            assert!(!pl.source_views.contains(&i));
            assert!(pl.is_frozen());
            pl.target.validate().unwrap();
        }
    }
    assert_eq!(out.uncertainty.len(), 3);
    assert!(out.confidence.iter().all(|&c| c > 0.0));
}

#[test]
fn ssl_and_uda_share_one_code_path() {
    let cfg = train_cfg(Mode::Ssl);
    let s = split(Mode::Ssl);
    let state = pretrain_views::<f32>(&s, &cfg, &mut MetricsLog::new(3)).unwrap();
    let run = |mode: Mode| {
        let mut c = cfg.clone();
        c.mode = mode;
        let sp = DatasetSplit::new(s.labeled.clone(), s.unlabeled.clone(), mode).unwrap();
        let mut st = state.clone();
        let mut log = MetricsLog::new(3);
        cotrain(&mut st, &sp, &c, &mut log).unwrap();
        (st, log.to_csv().replace(mode.as_str(), "MODE"))
    };
    let (a, la) = run(Mode::Ssl);
    let (b, lb) = run(Mode::Uda);
    assert_eq!(la, lb);
    for (x, y) in a.models.iter().zip(&b.models) {
        assert_eq!(x.params(), y.params());
    }
}

#[test]
fn metrics_rows_per_stage() {
    let cfg = exp_cfg(Mode::Ssl);
    let data = build_data(&cfg.data, Mode::Ssl).unwrap();
    let out = run_in_memory(&cfg, &data).map_err(|e| e.0).unwrap();
    assert_eq!(out.log.stage(1).count(), 6);
    assert_eq!(out.log.stage(2).count(), 4);
    let csv = out.log.to_csv();
    assert_eq!(csv.lines().count(), 1 + 10);
    let probes = out.log.stage(2).filter(|r| r.probe_dsc.is_some()).count();
    assert_eq!(probes, 2);

    let cfg = exp_cfg(Mode::SupervisedOnly);
    let data = build_data(&cfg.data, Mode::SupervisedOnly).unwrap();
    let out = run_in_memory(&cfg, &data).map_err(|e| e.0).unwrap();
    assert_eq!(out.log.stage(2).count(), 0);
    assert_eq!(out.log.stage(1).count(), 6);
    assert!(out.summary.before_stage2.is_none());
}

#[test]
fn runs_are_deterministic() {
    let cfg = exp_cfg(Mode::Ssl);
    let data = build_data(&cfg.data, Mode::Ssl).unwrap();
    let a = run_in_memory(&cfg, &data).map_err(|e| e.0).unwrap();
    let b = run_in_memory(&cfg, &data).map_err(|e| e.0).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.summary, b.summary);
}

#[test]
fn sequential_and_parallel_runs_match() {
    let cfg = exp_cfg(Mode::Ssl);
    let data = build_data(&cfg.data, Mode::Ssl).unwrap();
    let a = run_in_memory(&cfg, &data).map_err(|e| e.0).unwrap();
    umct::par::set_force_sequential(true);
    let b = run_in_memory(&cfg, &data).map_err(|e| e.0);
    umct::par::set_force_sequential(false);
    let b = b.unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.summary, b.summary);
}

#[test]
fn self_training_refresh_schedule() {
    let mut cfg = train_cfg(Mode::SelfTrain);
    cfg.n_views = 1;
    let s = split(Mode::Ssl);
    let base = pretrain_views::<f32>(&s, &cfg, &mut MetricsLog::new(1)).unwrap();
    for (refresh, want) in [(1000, 1), (4, 1), (2, 2), (1, 4)] {
        cfg.self_train_refresh = refresh;
        let mut st = base.clone();
        let mut log = MetricsLog::new(1);
        assert_eq!(self_train_baseline(&mut st, &s, &cfg, &mut log).unwrap(), want);
        assert_eq!(log.stage(2).count(), 4);
        assert_eq!(log.header(), MetricsLog::new(1).header());
    }
}

#[test]
fn run_directory_is_not_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = exp_cfg(Mode::SupervisedOnly);
    let art = run_experiment(&cfg, dir.path(), false).unwrap();
    for f in ["config.json", "metrics.csv", "summary.json", "manifest.json", "view0.ckpt", "view2.ckpt"] {
        assert!(art.run_dir.join(f).exists(), "{f}");
    }
    let err = run_experiment(&cfg, dir.path(), false).unwrap_err();
    assert!(matches!(err, Error::RunExists(_)), "{err}");
    run_experiment(&cfg, dir.path(), true).unwrap();
}

#[test]
fn source_free_mode_needs_checkpoints() {
    let cfg = exp_cfg(Mode::UdaNoSource);
    assert!(cfg.validate().is_err());
}
