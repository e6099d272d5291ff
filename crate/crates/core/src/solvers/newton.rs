//! Proximal Newton with a coordinate-descent inner solver.
//!
//! The outer loop builds the exact Hessian `n · Cov_β(φ)` from the quadrature
//! masses. The inner loop minimizes
//!
//! ```text
//! gᵀd + ½ dᵀ H d + λ Σ w_j |β_j + d_j|
//! ```
//!
//! by cyclic coordinate descent, alternating sweeps over the current active
//! set with full sweeps until a full sweep leaves the support unchanged.
//! Once the support has settled, the step is polished by solving the reduced
//! linear system on the active set exactly. A backtracking line search on the
//! true objective accepts the step.

use nalgebra::{DMatrix, DVector};

use super::{active_count, finish, soft_threshold, IterRecord, Problem, SolverConfig, SolverTrace, Stopping, ARMIJO};
use crate::error::{Error, Result};
use crate::model::{DataSummary, FittedDensity, LogSplineModel};

/// Coordinate changes below this (relative to the iterate scale) end a sweep loop.
const CD_TOL: f64 = 1e-13;

pub fn fit_prox_newton(model: &LogSplineModel, data: &DataSummary, config: &SolverConfig) -> Result<FittedDensity> {
    let problem = Problem::new(model, data, config)?;
    let stop = Stopping::new(config);
    let mut x = problem.initial_point(config)?;
    let mut eval = problem.smooth(&x)?;
    let mut penalty = problem.penalty(&x);
    let mut fx = eval.value + penalty;
    let mut grad = problem.gradient(&eval);

    let mut trace = SolverTrace::default();
    let mut converged = false;

    for iter in 1..=config.max_iters {
        let mut hess = model.basis_covariance(&eval.grid.masses) * problem.n();
        for j in 0..problem.dim() {
            hess[(j, j)] += config.ridge_h;
        }
        let z = solve_subproblem(&problem, &hess, &grad, &x, config.cd_passes)?;
        let d = &z - &x;
        let delta = grad.dot(&d) + problem.penalty(&z) - penalty;

        if d.amax() == 0.0 || !(delta < 0.0) {
            trace.records.push(IterRecord {
                iter,
                objective: fx,
                active_set: active_count(&x),
                step_size: 1.0,
                flops: 0.0,
            });
            converged = stop.kkt_ok(problem.kkt_residual(&x, &grad));
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..config.ls_max {
            let cand: DVector<f64> = &x + &d * t;
            if let Ok(e) = problem.smooth(&cand) {
                let pen = problem.penalty(&cand);
                if e.value + pen <= fx + ARMIJO * t * delta {
                    accepted = Some((cand, e, pen));
                    break;
                }
            }
            t *= config.ls_beta;
        }
        let Some((x_new, e_new, pen_new)) = accepted else {
            // Line search exhausted: keep the current iterate and stop.
            trace.records.push(IterRecord {
                iter,
                objective: fx,
                active_set: active_count(&x),
                step_size: 0.0,
                flops: 0.0,
            });
            converged = stop.kkt_ok(problem.kkt_residual(&x, &grad));
            break;
        };
        let f_prev = fx;
        x = x_new;
        eval = e_new;
        penalty = pen_new;
        fx = eval.value + penalty;
        grad = problem.gradient(&eval);
        trace.records.push(IterRecord {
            iter,
            objective: fx,
            active_set: active_count(&x),
            step_size: t,
            flops: 0.0,
        });
        if stop.small_change(f_prev, fx) && stop.kkt_ok(problem.kkt_residual(&x, &grad)) {
            converged = true;
            break;
        }
    }
    if !converged && !trace.is_empty() {
        converged = stop.kkt_ok(problem.kkt_residual(&x, &grad));
    }
    finish(&problem, config, x, trace, converged)
}

/// Minimizes the L1-regularized quadratic model around `beta`; returns the
/// new point `z = β + d`.
fn solve_subproblem(
    problem: &Problem<'_>,
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    beta: &DVector<f64>,
    max_passes: usize,
) -> Result<DVector<f64>> {
    let k = problem.dim();
    for j in 0..k {
        if problem.free[j] && !(hess[(j, j)] > 0.0) {
            return Err(Error::IllConditioned(format!(
                "Hessian diagonal {j} is {} after jitter",
                hess[(j, j)]
            )));
        }
    }
    let mut z = beta.clone();
    // q = H (z - β), maintained incrementally.
    let mut q = DVector::zeros(k);
    let scale = beta.amax().max(1.0);

    let update = |j: usize, z: &mut DVector<f64>, q: &mut DVector<f64>| -> f64 {
        let a = hess[(j, j)];
        let slope = grad[j] + q[j];
        let new = soft_threshold(z[j] - slope / a, problem.lambda * problem.weights[j] / a);
        let change = new - z[j];
        if change != 0.0 {
            z[j] = new;
            q.axpy(change, &hess.column(j), 1.0);
        }
        change.abs()
    };

    let free: Vec<usize> = (0..k).filter(|&j| problem.free[j]).collect();
    let mut passes = 0;
    while passes < max_passes {
        let mut biggest = 0.0f64;
        for &j in &free {
            biggest = biggest.max(update(j, &mut z, &mut q));
        }
        passes += 1;
        if biggest <= CD_TOL * scale {
            break;
        }
        let active: Vec<usize> = free.iter().copied().filter(|&j| z[j] != 0.0).collect();
        while passes < max_passes {
            let mut inner = 0.0f64;
            for &j in &active {
                inner = inner.max(update(j, &mut z, &mut q));
            }
            passes += 1;
            if inner <= CD_TOL * scale {
                break;
            }
        }
    }
    if let Some(polished) = polish(problem, hess, grad, beta, &z) {
        if model_value(problem, hess, grad, beta, &polished) <= model_value(problem, hess, grad, beta, &z) {
            z = polished;
        }
    }
    Ok(z)
}

/// Value of the penalized quadratic model at `z`.
fn model_value(
    problem: &Problem<'_>,
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    beta: &DVector<f64>,
    z: &DVector<f64>,
) -> f64 {
    let d = z - beta;
    grad.dot(&d) + 0.5 * d.dot(&(hess * &d)) + problem.penalty(z)
}

/// Solves the stationarity equations on the support of `z` with the signs held
/// fixed. Returns `None` when the solve fails or flips a sign.
fn polish(
    problem: &Problem<'_>,
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    beta: &DVector<f64>,
    z: &DVector<f64>,
) -> Option<DVector<f64>> {
    let active: Vec<usize> = (0..problem.dim()).filter(|&j| problem.free[j] && z[j] != 0.0).collect();
    if active.is_empty() {
        return None;
    }
    let m = active.len();
    // Off-support coordinates sit at zero; their step is -β_j (or 0 if fixed).
    let mut d_off = DVector::zeros(problem.dim());
    for j in 0..problem.dim() {
        if !active.contains(&j) {
            d_off[j] = z[j] - beta[j];
        }
    }
    let cross = hess * &d_off;
    let h_aa = DMatrix::from_fn(m, m, |a, b| hess[(active[a], active[b])]);
    let rhs = DVector::from_fn(m, |a, _| {
        let j = active[a];
        -(grad[j] + cross[j] + problem.lambda * problem.weights[j] * z[j].signum())
    });
    let d_a = h_aa.cholesky()?.solve(&rhs);
    let mut out = z.clone();
    for (a, &j) in active.iter().enumerate() {
        let v = beta[j] + d_a[a];
        if !v.is_finite() || (problem.weights[j] > 0.0 && v.signum() != z[j].signum()) {
            return None;
        }
        out[j] = v;
    }
    Some(out)
}
