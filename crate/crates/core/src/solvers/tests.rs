use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::basis::{thin_knots, BasisSpec};
use crate::model::{information_matrix, neg_log_likelihood, score_vector, QuadratureGrid, Reduction};

/// Draws from a smooth bump on [0,1]: the average of three uniforms.
fn bump_sample(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (rng.random::<f64>() + rng.random::<f64>() + rng.random::<f64>()) / 3.0)
        .collect()
}

fn setup(order: usize, max_knots: usize, data: &[f64]) -> (LogSplineModel, DataSummary) {
    let full = BasisSpec::data_adaptive(order, data).unwrap();
    let spec = full.with_knots(thin_knots(full.knots(), max_knots)).unwrap();
    let grid = QuadratureGrid::for_sample_size(data.len());
    let summary = DataSummary::new(&spec, data).unwrap();
    (LogSplineModel::new(spec, grid), summary)
}

/// Plain damped Newton on the unpenalized likelihood with the intercept
/// pinned at zero and a dense solve at every step.
fn dense_newton_mle(model: &LogSplineModel, data: &DataSummary) -> DVector<f64> {
    let k = model.dim();
    let mut beta = DVector::zeros(k);
    for _ in 0..200 {
        let score = score_vector(model, &beta, data).unwrap();
        let info = information_matrix(model, &beta).unwrap() * data.n as f64;
        let free: Vec<usize> = (1..k).collect();
        let h = DMatrix::from_fn(free.len(), free.len(), |a, b| info[(free[a], free[b])]);
        let g = DVector::from_fn(free.len(), |a, _| score[free[a]] * data.n as f64);
        let step = h.lu().solve(&g).unwrap();
        let f0 = neg_log_likelihood(model, &beta, data, Reduction::Sum).unwrap();
        let mut t = 1.0;
        loop {
            let mut cand = beta.clone();
            for (a, &j) in free.iter().enumerate() {
                cand[j] += t * step[a];
            }
            if neg_log_likelihood(model, &cand, data, Reduction::Sum).unwrap() <= f0 + 1e-14 || t < 1e-10 {
                beta = cand;
                break;
            }
            t *= 0.5;
        }
        if step.amax() < 1e-13 {
            break;
        }
    }
    beta
}

fn tiny_instance() -> (LogSplineModel, DataSummary, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..20).map(|_| rng.random::<f64>().powf(1.5)).collect();
    let spec = BasisSpec::new(0, vec![0.3, 0.7], true).unwrap();
    let summary = DataSummary::new(&spec, &data).unwrap();
    (LogSplineModel::new(spec, QuadratureGrid::for_sample_size(20)), summary, data)
}

fn objective(model: &LogSplineModel, data: &DataSummary, cfg: &SolverConfig, beta: &DVector<f64>) -> f64 {
    penalized_objective(model, data, cfg, beta).unwrap()
}

#[test]
fn soft_threshold_examples() {
    assert_eq!(soft_threshold(1.5, 1.0), 0.5);
    assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
    assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
}

#[test]
fn huge_lambda_shrinks_everything() {
    let data = bump_sample(100, 1);
    let (model, summary) = setup(1, 20, &data);
    for alg in Algorithm::ALL {
        let cfg = SolverConfig::new(alg, 1e6);
        let fit = fit(&model, &summary, &cfg).unwrap();
        assert!(fit.beta().iter().all(|b| *b == 0.0), "{alg}");
        let nll0 = neg_log_likelihood(&model, &DVector::zeros(model.dim()), &summary, Reduction::Sum).unwrap();
        assert_eq!(fit.trace().final_objective().unwrap(), nll0);
        assert!(fit.converged());
        if alg == Algorithm::ProxNewton {
            assert_eq!(fit.trace().len(), 1);
        }
    }
}

/// For a piecewise-constant log-density with knots on quadrature edges the
/// MLE is the histogram: `p = c_i / (n w_i)` on each cell.
fn histogram_mle(data: &[f64], knots: &[f64]) -> DVector<f64> {
    let mut edges = vec![0.0];
    edges.extend_from_slice(knots);
    edges.push(1.0);
    let cells = edges.len() - 1;
    let log_heights: Vec<f64> = (0..cells)
        .map(|i| {
            let count = data
                .iter()
                .filter(|&&x| x >= edges[i] && (x < edges[i + 1] || (i == cells - 1 && x <= 1.0)))
                .count() as f64;
            (count / (edges[i + 1] - edges[i])).ln()
        })
        .collect();
    let mut beta = DVector::zeros(cells);
    for i in 1..cells {
        beta[i] = log_heights[i] - log_heights[i - 1];
    }
    beta
}

#[test]
fn unpenalized_fit_matches_closed_form_and_dense_newton() {
    let (model, summary, data) = tiny_instance();
    let exact = histogram_mle(&data, model.spec().knots());
    let oracle = dense_newton_mle(&model, &summary);
    assert!((&oracle - &exact).amax() < 1e-6);
    let tolerance = |alg| if alg == Algorithm::ProxNewton { 1e-8 } else { 1e-6 };
    for alg in Algorithm::ALL {
        let mut cfg = SolverConfig::new(alg, 0.0);
        cfg.tol = 1e-14;
        cfg.kkt_tol = 1e-12;
        let fit = fit(&model, &summary, &cfg).unwrap();
        let err = (fit.beta() - &exact).amax();
        assert!(err < tolerance(alg), "{alg}: {err}");
    }
}

#[test]
fn solvers_agree_on_objective() {
    let data = bump_sample(200, 7);
    let (model, summary) = setup(1, 15, &data);
    let lambda = 2.0;
    let mut values = Vec::new();
    for alg in Algorithm::ALL {
        let mut cfg = SolverConfig::new(alg, lambda);
        cfg.max_iters *= 4;
        let fit = fit(&model, &summary, &cfg).unwrap();
        values.push((alg, objective(&model, &summary, &cfg, fit.beta())));
    }
    let best = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    for (alg, v) in values {
        assert!((v - best).abs() <= 1e-5 * best.abs(), "{alg}: {v} vs {best}");
    }
}

#[test]
fn kkt_conditions_hold_at_solution() {
    let data = bump_sample(150, 11);
    let (model, summary) = setup(2, 20, &data);
    for lambda in [0.5, 5.0] {
        let cfg = SolverConfig::new(Algorithm::ProxNewton, lambda);
        let fit = fit(&model, &summary, &cfg).unwrap();
        assert!(fit.converged());
        let problem = Problem::new(&model, &summary, &cfg).unwrap();
        let grad = problem.gradient(&problem.smooth(fit.beta()).unwrap());
        let slack = 10.0 * cfg.kkt_tol * summary.n as f64;
        for j in 1..model.dim() {
            let b = fit.beta()[j];
            if b != 0.0 {
                assert!((grad[j] + lambda * b.signum()).abs() < slack, "j={j}");
            } else {
                assert!(grad[j].abs() <= lambda + slack, "j={j}");
            }
        }
    }
}

#[test]
fn newton_objective_is_monotone_and_support_settles() {
    let data = bump_sample(300, 5);
    let (model, summary) = setup(2, 40, &data);
    let cfg = SolverConfig::new(Algorithm::ProxNewton, 1.0);
    let fit = fit(&model, &summary, &cfg).unwrap();
    assert!(fit.converged());
    let recs = &fit.trace().records;
    assert!(recs.windows(2).all(|w| w[1].objective <= w[0].objective));
    let tail = (recs.len() / 10).max(1);
    let last = recs.last().unwrap().active_set;
    assert!(recs[recs.len() - tail..].iter().all(|r| r.active_set == last));
    let flops: Vec<f64> = recs.iter().map(|r| r.flops).collect();
    assert!(flops.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn shrinkage_is_monotone_along_warm_path() {
    let data = bump_sample(200, 9);
    let (model, summary) = setup(1, 25, &data);
    let lambdas: Vec<f64> = (0..12).map(|i| 50.0 * 0.6f64.powi(i)).collect();
    let mut warm = None;
    let mut norms = Vec::new();
    for &lambda in &lambdas {
        let cfg = SolverConfig::new(Algorithm::ProxNewton, lambda).with_warm_start(warm.take());
        let fit = fit(&model, &summary, &cfg).unwrap();
        norms.push(fit.l1_norm());
        warm = Some(fit.beta().clone());
    }
    for w in norms.windows(2) {
        assert!(w[1] >= w[0] - 1e-6, "{norms:?}");
    }
}

#[test]
fn warm_and_cold_starts_agree() {
    let data = bump_sample(120, 13);
    let (model, summary) = setup(2, 15, &data);
    let cold = SolverConfig::new(Algorithm::ProxNewton, 3.0);
    let start = fit(&model, &summary, &cold.with_lambda(10.0)).unwrap();
    let warm = cold.with_warm_start(Some(start.beta().clone()));
    let a = objective(&model, &summary, &cold, fit(&model, &summary, &cold).unwrap().beta());
    let b = objective(&model, &summary, &cold, fit(&model, &summary, &warm).unwrap().beta());
    assert!((a - b).abs() <= 1e-5 * a.abs());
}

#[test]
fn lambda_max_is_the_zero_threshold() {
    let data = bump_sample(100, 17);
    let (model, summary) = setup(1, 20, &data);
    let lmax = lambda_max(&model, &summary, true).unwrap();
    let above = fit(&model, &summary, &SolverConfig::new(Algorithm::ProxNewton, lmax * 1.001)).unwrap();
    assert!(above.active_set().is_empty());
    let below = fit(&model, &summary, &SolverConfig::new(Algorithm::ProxNewton, lmax * 0.9)).unwrap();
    assert!(!below.active_set().is_empty());
}

#[test]
fn l1_bound_is_hit_within_one_percent() {
    let data = bump_sample(150, 19);
    let (model, summary) = setup(1, 20, &data);
    let free = fit(&model, &summary, &SolverConfig::new(Algorithm::ProxNewton, 0.5)).unwrap();
    let bound = 0.5 * free.l1_norm();
    let fit = fit_l1_bound(&model, &summary, bound, &SolverConfig::default()).unwrap();
    assert!((fit.l1_norm() - bound).abs() <= 0.01 * bound);
    match fit.penalty() {
        Penalty::Bound { value, lambda } => {
            assert_eq!(value, bound);
            assert!(lambda > 0.5);
        }
        other => panic!("unexpected penalty {other:?}"),
    }
}

#[test]
fn adagrad_preconditioner_is_positive() {
    let data = bump_sample(80, 23);
    let (model, _) = setup(0, 10, &data);
    let masses = model.eval(&DVector::zeros(model.dim())).unwrap().masses;
    let diag = adagrad::information_diagonal(&model, &masses, 80.0);
    // The constant column has zero variance; the floor keeps its step finite.
    assert_eq!(diag[0], 0.0);
    assert!(diag.iter().all(|d| (d + 1e-10).sqrt() > 0.0));
}

#[test]
fn trace_csv_layout() {
    let data = bump_sample(60, 29);
    let (model, summary) = setup(1, 8, &data);
    let fit = fit(&model, &summary, &SolverConfig::new(Algorithm::Fista, 1.0)).unwrap();
    let mut buf = Vec::new();
    fit.trace().write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "iter,objective,active_set,step_size,flops");
    assert_eq!(lines.count(), fit.trace().len());
}

#[test]
fn invalid_configs_rejected() {
    let (model, summary, _) = tiny_instance();
    let mut cfg = SolverConfig::new(Algorithm::Fista, -1.0);
    assert!(fit(&model, &summary, &cfg).is_err());
    cfg.lambda = 1.0;
    cfg.ls_beta = 1.0;
    assert!(fit(&model, &summary, &cfg).is_err());
    assert!("newton".parse::<Algorithm>().is_err());
    assert_eq!("prox_newton_lbfgs".parse::<Algorithm>().unwrap(), Algorithm::ProxNewtonLbfgs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn soft_threshold_is_the_l1_prox(v in -10.0f64..10.0, t in 0.0f64..5.0) {
        let s = soft_threshold(v, t);
        let obj = |z: f64| 0.5 * (z - v).powi(2) + t * z.abs();
        for dz in [-1e-3, 1e-3, -0.5, 0.5] {
            prop_assert!(obj(s) <= obj(s + dz) + 1e-12);
        }
        prop_assert!(s.abs() <= v.abs());
    }

    #[test]
    fn newton_meets_kkt_on_random_problems(seed in 0u64..500, lambda in 0.1f64..20.0, order in 0usize..3) {
        let data = bump_sample(60, seed);
        let (model, summary) = setup(order, 10, &data);
        let cfg = SolverConfig::new(Algorithm::ProxNewton, lambda);
        let fit = fit(&model, &summary, &cfg).unwrap();
        let kkt = kkt_residual(&model, &summary, &cfg, fit.beta()).unwrap();
        prop_assert!(kkt <= 10.0 * cfg.kkt_tol, "kkt {}", kkt);
    }
}
