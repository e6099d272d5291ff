use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hal_density::selection::{cross_validate, CvPlan};
use hal_density::solvers::fit;
use hal_density::trend::{admm_fit, fused_lasso_prox, AdmmConfig, TfProblem};
use hal_density::{Algorithm, SolverConfig};
use hal_density_bench::{problem, sample};

fn solvers(c: &mut Criterion) {
    let (model, data) = problem(200, 2, 50);
    let mut group = c.benchmark_group("solver_tn200_k2");
    group.sample_size(10);
    for alg in Algorithm::ALL {
        let config = SolverConfig::new(alg, 2.0);
        group.bench_function(BenchmarkId::from_parameter(alg), |b| {
            b.iter(|| fit(black_box(&model), black_box(&data), &config).unwrap())
        });
    }
    group.finish();
}

fn basis_design(c: &mut Criterion) {
    let (model, _) = problem(400, 1, 100);
    let points = sample(400);
    c.bench_function("design_400x100", |b| b.iter(|| model.spec().design(black_box(&points)).unwrap()));
}

fn cross_validation(c: &mut Criterion) {
    let data = sample(100);
    let plan = CvPlan {
        orders: vec![1],
        max_knots: Some(25),
        ..CvPlan::default()
    };
    let config = SolverConfig::new(Algorithm::ProxNewton, 1.0);
    let mut group = c.benchmark_group("cv");
    group.sample_size(10);
    group.bench_function("n100_k1", |b| b.iter(|| cross_validate(black_box(&data), &plan, &config).unwrap()));
    group.finish();
}

fn trend_filter(c: &mut Criterion) {
    let data = sample(200);
    let problem = TfProblem::new(&data, None, 1, 1.0).unwrap();
    let config = AdmmConfig::default();
    let mut group = c.benchmark_group("trend_filter");
    group.sample_size(10);
    group.bench_function("admm_n200_k1", |b| b.iter(|| admm_fit(black_box(&problem), &config).unwrap()));
    group.finish();

    let v: Vec<f64> = (0..1000).map(|i| ((i * 37 % 101) as f64 / 50.0).sin()).collect();
    c.bench_function("fused_lasso_prox_1000", |b| b.iter(|| fused_lasso_prox(black_box(&v), 0.3)));
}

criterion_group!(benches, solvers, basis_design, cross_validation, trend_filter);
criterion_main!(benches);
