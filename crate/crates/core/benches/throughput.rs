//! One worker against the full pool on the data-parallel workloads:
//! multi-restart evaluation, dataset robustification and a lambda sweep.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrm_core::attacks::{AdversaryBudget, Norm};
use rrm_core::bench::evaluate;
use rrm_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use rrm_core::models::{build_model, Model};
use rrm_core::par;
use rrm_core::robustify::{robustify_dataset, RobustifyConfig};
use rrm_core::trainers::{presets, train, Method, TrainConfig};

fn setup() -> (Dataset, Model) {
    let spec = SyntheticSpec { n: 512, ..Default::default() };
    let data = generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = presets::synthetic(Method::Sat, data.inputs.row_len());
    let mut teacher = build_model(&cfg.model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    teacher.freeze();
    (data, teacher)
}

fn pools() -> [(&'static str, usize); 2] {
    [("1-thread", 1), ("full-pool", std::thread::available_parallelism().map_or(1, |n| n.get()))]
}

fn multi_restart_eval(c: &mut Criterion) {
    let (data, model) = setup();
    let budget = AdversaryBudget::new(Norm::Linf, 0.5, 10).with_restarts(4).with_box(None);
    let mut group = c.benchmark_group("multi_restart_eval");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    evaluate(&model, &data, Some(&budget), &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn robustify(c: &mut Criterion) {
    let (data, teacher) = setup();
    let cfg = RobustifyConfig { steps: 50, ..Default::default() };
    let mut group = c.benchmark_group("robustify");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    robustify_dataset(&teacher, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn lambda_sweep(c: &mut Criterion) {
    let (data, teacher) = setup();
    let base = TrainConfig { epochs: 2, ..presets::synthetic(Method::Rrm, data.inputs.row_len()) };
    let lambdas = [1e-5, 1e-3, 1e-1, 1.0];
    let mut group = c.benchmark_group("lambda_sweep");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    par::map(&lambdas, |&lambda| {
                        train(&TrainConfig { lambda, ..base.clone() }, &data, Some(&teacher)).unwrap().0
                    })
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, multi_restart_eval, robustify, lambda_sweep);
criterion_main!(benches);
