//! Proximal gradient with a diagonal information preconditioner.
//!
//! Each coordinate moves with step `base / sqrt(I_jj + ε)` where `I_jj` is the
//! current diagonal of the Fisher information, recomputed every iteration.
//! The common scale `base` is found by backtracking on a diagonal
//! majorization of the smooth part.

use nalgebra::DVector;

use super::{active_count, finish, IterRecord, Problem, SolverConfig, SolverTrace, Stopping};
use crate::error::Result;
use crate::model::{DataSummary, FittedDensity, LogSplineModel};

const GROWTH: f64 = 1.0 / 0.9;

/// `n · Var_β(φ_j)` for every column, from quadrature masses.
pub(crate) fn information_diagonal(model: &LogSplineModel, masses: &DVector<f64>, n: f64) -> DVector<f64> {
    let design = model.grid_design();
    let mean = model.expected_basis(masses);
    DVector::from_iterator(
        design.ncols(),
        (0..design.ncols()).map(|j| {
            let col = design.column(j);
            let second: f64 = col.iter().zip(masses.iter()).map(|(v, m)| v * v * m).sum();
            n * (second - mean[j] * mean[j]).max(0.0)
        }),
    )
}

pub fn fit_prox_adagrad(model: &LogSplineModel, data: &DataSummary, config: &SolverConfig) -> Result<FittedDensity> {
    let problem = Problem::new(model, data, config)?;
    let stop = Stopping::new(config);
    let mut x = problem.initial_point(config)?;
    let mut eval = problem.smooth(&x)?;
    let mut fx = eval.value + problem.penalty(&x);
    let mut grad = problem.gradient(&eval);
    let mut base = config.base_step;

    let mut trace = SolverTrace::default();
    let mut converged = false;

    for iter in 1..=config.max_iters {
        let diag = information_diagonal(model, &eval.grid.masses, problem.n());
        let scale: Vec<f64> = diag.iter().map(|d| (d + config.adagrad_eps).sqrt()).collect();
        debug_assert!(scale.iter().all(|s| *s > 0.0));

        let mut b_try = (base * GROWTH).min(config.base_step.max(base));
        let mut accepted = None;
        for _ in 0..config.ls_max {
            let cand = problem.prox_step(&x, &grad, &|j| b_try / scale[j]);
            let diff = &cand - &x;
            if let Ok(e) = problem.smooth(&cand) {
                let quad: f64 = diff.iter().zip(&scale).map(|(d, s)| d * d * s).sum::<f64>() / b_try;
                let bound = eval.value + grad.dot(&diff) + 0.5 * quad;
                if e.value <= bound + 1e-12 * bound.abs().max(1.0) {
                    accepted = Some((cand, e));
                    break;
                }
            }
            b_try *= config.ls_beta;
        }
        let Some((x_new, e_new)) = accepted else {
            break;
        };
        base = b_try;
        let f_prev = fx;
        x = x_new;
        eval = e_new;
        fx = eval.value + problem.penalty(&x);
        grad = problem.gradient(&eval);
        trace.records.push(IterRecord {
            iter,
            objective: fx,
            active_set: active_count(&x),
            step_size: base,
            flops: 0.0,
        });
        if stop.small_change(f_prev, fx) && stop.kkt_ok(problem.kkt_residual(&x, &grad)) {
            converged = true;
            break;
        }
    }
    if !converged {
        converged = stop.kkt_ok(problem.kkt_residual(&x, &grad));
    }
    finish(&problem, config, x, trace, converged)
}
