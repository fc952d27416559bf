use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mhattn::attention::forward_matrix;
use mhattn::bands::SolveOptions;
use mhattn::boolean_model::sample_uniform;
use mhattn::instance::generate_instance;
use mhattn::moment::estimate_projection_sum;
use mhattn::regress::{draw_examples, fit_value_matrices};
use mhattn::rng::{seeded, SeedTree};
use mhattn::sculptor::{lp_certify, min_norm_point_with, CertifyParams};
use mhattn::LayerOracle;
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let layer = generate_instance(4, 16, 12.0, &mut seeded(1));
    let x = sample_uniform(8, 16, &mut seeded(2));
    c.bench_function("forward m=4 d=16 k=8", |b| b.iter(|| forward_matrix(black_box(&layer), black_box(x.matrix()))));
}

fn moment(c: &mut Criterion) {
    let layer = generate_instance(1, 16, 12.0, &mut seeded(3));
    c.bench_function("moment estimate N=2e4", |b| {
        b.iter(|| {
            let oracle = LayerOracle::new(layer.clone(), 4);
            estimate_projection_sum(&oracle, 20_000, &SeedTree::new(4), "phase1")
        })
    });
}

fn certify_and_min_norm(c: &mut Criterion) {
    let layer = generate_instance(1, 16, 12.0, &mut seeded(5));
    let w = layer.w_sum();
    let params = CertifyParams { eps: 0.05, lambda_prime: 1.0, mass_floor: 1.0 / 3.0, t: 20_000 };
    let mut group = c.benchmark_group("enclosure");
    group.sample_size(10);
    group.bench_function("certify T=2e4", |b| {
        b.iter(|| {
            let oracle = LayerOracle::new(layer.clone(), 4);
            lp_certify(&oracle, &w, &params, 1e6, &SeedTree::new(6), "phase2").unwrap()
        })
    });
    let oracle = LayerOracle::new(layer.clone(), 4);
    let (body, _) = lp_certify(&oracle, &w, &CertifyParams { t: 100_000, ..params }, 1e6, &SeedTree::new(7), "phase4").unwrap();
    group.bench_function("min-norm point", |b| {
        b.iter_batched(|| body.clone(), |body| min_norm_point_with(&body, &SolveOptions::default()).unwrap(), BatchSize::SmallInput)
    });
    group.finish();
}

fn regression(c: &mut Criterion) {
    let layer = generate_instance(1, 16, 12.0, &mut seeded(8));
    let oracle = LayerOracle::new(layer.clone(), 4);
    let train = draw_examples(&oracle, 2000, &SeedTree::new(9), "train");
    let thetas = layer.thetas();
    let mut group = c.benchmark_group("regression");
    group.sample_size(20);
    group.bench_function("value fit N=2000", |b| b.iter(|| fit_value_matrices(black_box(&train), &thetas, 1.0).unwrap()));
    group.finish();
}

criterion_group!(benches, forward, moment, certify_and_min_norm, regression);
criterion_main!(benches);
