//! Rayon pool versus a single-thread run of the same data-parallel loops.
//!
//! Without the `parallel` feature both arms run the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pgnn::dataset::{derive_targets, PreparedData, SplitSpec};
use pgnn::eval::{noise_sweep, NoiseSweepConfig};
use pgnn::nn::{Mlp, DEFAULT_ARCHITECTURE};
use pgnn::par;
use pgnn::pruning::{constraint_scores, importance_scores, ElementKind, ScoringBatch};
use pgnn::synth::{generate, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (PreparedData, Mlp) {
    let raw = generate(&SynthConfig {
        n_minutes: 20_000,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let data = PreparedData::new(&derive_targets(&raw).unwrap(), &SplitSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Mlp::new(&DEFAULT_ARCHITECTURE, &mut rng).unwrap();
    (data, model)
}

fn modes() -> [(&'static str, bool); 2] {
    [("pool", false), ("sequential", true)]
}

fn run<T: Send>(sequential: bool, f: impl FnOnce() -> T + Send) -> T {
    if sequential {
        par::sequential(f)
    } else {
        f()
    }
}

fn bench(c: &mut Criterion) {
    let (data, model) = setup();
    let loss = data.loss_config(0.36);
    let scoring = data.train.tail(4096);
    let batch = ScoringBatch {
        x: &scoring.x,
        y: &scoring.y,
        windows: scoring.segments(),
    };
    let sweep = NoiseSweepConfig::default();

    let mut g = c.benchmark_group("predict");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::new(name, data.train.len()), |b| {
            b.iter(|| run(seq, || black_box(model.predict(&data.train.x).unwrap())))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("scores");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::new(name, "neuron"), |b| {
            b.iter(|| {
                run(seq, || {
                    let s = importance_scores(&model, &batch, &loss, ElementKind::Neuron).unwrap();
                    let c = constraint_scores(&model, &batch, &loss, ElementKind::Neuron).unwrap();
                    black_box((s, c))
                })
            })
        });
        g.bench_function(BenchmarkId::new(name, "weight"), |b| {
            b.iter(|| run(seq, || black_box(importance_scores(&model, &batch, &loss, ElementKind::Weight).unwrap())))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("noise_sweep");
    g.sample_size(20);
    for (name, seq) in modes() {
        g.bench_function(name, |b| {
            b.iter(|| run(seq, || black_box(noise_sweep(&model, &data.test, &data.target_scaler, &sweep).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
