//! Parallel vs sequential execution of the independent-job workloads.
//!
//! `par::map` uses rayon when the `parallel` feature is on; `map_sequential`
//! is the fallback path. Both run in each group so the speed-up is read off
//! one report. Build with `--no-default-features` to time the whole crate
//! without rayon.

use std::hint::black_box;

use camib_core::par;
use camib_core::rng::RngStream;
use camib_core::synth::{generate, BiasSpec};
use camib_core::train::{train, TrainConfig};
use camib_core::verify::{verify_all, VerifyConfig};
use camib_core::vib::{kl_to_standard_normal, GaussianPosterior};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

type Mapper = fn(Vec<u64>, &(dyn Fn(u64) -> f64 + Sync)) -> Vec<f64>;

fn parallel(items: Vec<u64>, f: &(dyn Fn(u64) -> f64 + Sync)) -> Vec<f64> {
    par::map(items, f)
}

fn sequential(items: Vec<u64>, f: &(dyn Fn(u64) -> f64 + Sync)) -> Vec<f64> {
    par::map_sequential(items, f)
}

const MAPPERS: [(&str, Mapper); 2] = [("parallel", parallel), ("sequential", sequential)];

/// One Monte-Carlo KL estimate with 10^4 draws on a seeded random posterior.
fn mc_kl(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let mu = rng.uniform_tensor(&[1, 2, 4], -1.0, 1.0);
    let lv = rng.uniform_tensor(&[1, 2, 4], -1.0, 1.0);
    let post = GaussianPosterior::new(mu.clone(), lv.clone()).unwrap();
    let mut acc = 0.0;
    for _ in 0..10_000 {
        for (m, l) in mu.data().iter().zip(lv.data()) {
            let e = rng.normal();
            let z = m + (0.5 * l).exp() * e;
            acc += -0.5 * l - 0.5 * e * e + 0.5 * z * z;
        }
    }
    acc / 10_000.0 - kl_to_standard_normal(&post)
}

fn bench_mc(c: &mut Criterion) {
    let mut group = c.benchmark_group("mc_kl_20_posteriors");
    for (name, mapper) in MAPPERS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(mapper((0..20).collect(), &mc_kl)))
        });
    }
    group.finish();
}

fn bench_training_jobs(c: &mut Criterion) {
    let ds = generate(&BiasSpec {
        n_samples: 160,
        n_eval: 40,
        ..BiasSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        d: 8,
        hidden_dim: 8,
        ..TrainConfig::default()
    };
    let job = |seed: u64| {
        let m = train(&TrainConfig { seed, ..cfg.clone() }, &ds.train.batch).unwrap();
        m.history.last().unwrap().total
    };
    let mut group = c.benchmark_group("ablation_4_seeds");
    group.sample_size(10);
    for (name, mapper) in MAPPERS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(mapper((0..4).collect(), &job)))
        });
    }
    group.finish();
}

fn bench_verify(c: &mut Criterion) {
    let cfg = VerifyConfig {
        instances: 20,
        ..VerifyConfig::default()
    };
    let label = if par::is_parallel() { "parallel" } else { "sequential" };
    let mut group = c.benchmark_group("verify_all_20_instances");
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter(label), |b| {
        b.iter(|| black_box(verify_all(&cfg).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_mc, bench_training_jobs, bench_verify);
criterion_main!(benches);
