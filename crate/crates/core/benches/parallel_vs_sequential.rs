//! Rayon pool vs forced sequential path on the hot loops: one co-training step
//! (MC dropout draws and per-sample gradients) and sliding-window inference.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umct::nn::SegModelConfig;
use umct::par;
use umct::pipeline::{sliding_window_predict, PatchSpec, WindowSpec};
use umct::synth::{generate_dataset, PhantomRecipe};
use umct::trainer::schedule::{draw_labeled, draw_unlabeled};
use umct::trainer::{cotrain_step, TrainConfig, TrainState};

fn config() -> TrainConfig {
    TrainConfig {
        mc_samples: 4,
        labeled_batch: 1,
        unlabeled_batch: 4,
        patch: PatchSpec { size: [16; 3], fg_ratio: 0.5 },
        model: SegModelConfig { base_width: 4, depth: 2, ..SegModelConfig::default() },
        ..TrainConfig::default()
    }
}

const PATHS: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn cotrain(c: &mut Criterion) {
    let cfg = config();
    let recipe = PhantomRecipe { shape: [32; 3], ..PhantomRecipe::default() };
    let cases = generate_dataset(4, &recipe, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let labeled = draw_labeled::<f32>(&cases, cfg.labeled_batch, &cfg.patch, &mut rng).unwrap();
    let unlabeled = draw_unlabeled::<f32>(&cases, cfg.unlabeled_batch, &cfg.patch, &mut rng).unwrap();
    let start = TrainState::<f32>::new(&cfg).unwrap();

    let mut group = c.benchmark_group("cotrain_step");
    group.sample_size(10);
    for (name, seq) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_force_sequential(seq);
            b.iter_batched(
                || start.clone(),
                |mut s| cotrain_step(&mut s, &labeled, &unlabeled, &cfg).unwrap(),
                criterion::BatchSize::LargeInput,
            );
        });
    }
    group.finish();
    par::set_force_sequential(false);
}

fn sliding_window(c: &mut Criterion) {
    let cfg = config();
    let recipe = PhantomRecipe { shape: [48; 3], ..PhantomRecipe::default() };
    let volume = generate_dataset(1, &recipe, 7).unwrap().remove(0).volume;
    let state = TrainState::<f32>::new(&cfg).unwrap();
    let window = WindowSpec::half_overlap(cfg.patch.size);

    let mut group = c.benchmark_group("sliding_window");
    group.sample_size(10);
    for (name, seq) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_force_sequential(seq);
            b.iter(|| sliding_window_predict(&state.models[0], &volume, &window).unwrap());
        });
    }
    group.finish();
    par::set_force_sequential(false);
}

criterion_group!(benches, cotrain, sliding_window);
criterion_main!(benches);
