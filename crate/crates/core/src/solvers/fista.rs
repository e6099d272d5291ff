//! Accelerated proximal gradient with backtracking and function-value restart.

use nalgebra::DVector;

use super::{active_count, finish, IterRecord, Problem, SolverConfig, SolverTrace, Stopping, ROUNDING};
use crate::error::Result;
use crate::model::{DataSummary, FittedDensity, LogSplineModel};

/// Fraction of the previous Lipschitz estimate tried first at each iteration,
/// so the step can grow again after a conservative backtrack.
const LIPSCHITZ_RELAX: f64 = 0.9;

pub fn fit_fista(model: &LogSplineModel, data: &DataSummary, config: &SolverConfig) -> Result<FittedDensity> {
    let problem = Problem::new(model, data, config)?;
    let stop = Stopping::new(config);
    let mut x = problem.initial_point(config)?;
    let fx_eval = problem.smooth(&x)?;
    let mut fx = fx_eval.value + problem.penalty(&x);
    let mut grad_x = problem.gradient(&fx_eval);

    let mut y = x.clone();
    let mut y_eval = fx_eval;
    let mut t = 1.0f64;
    let mut lipschitz = problem.n().max(1.0);

    let mut trace = SolverTrace::default();
    let mut converged = false;

    for iter in 1..=config.max_iters {
        let grad_y = problem.gradient(&y_eval);
        let mut l_try = lipschitz * LIPSCHITZ_RELAX;
        let mut accepted = None;
        for _ in 0..config.ls_max {
            let step = 1.0 / l_try;
            let cand = problem.prox_step(&y, &grad_y, &|_| step);
            let diff = &cand - &y;
            if let Ok(eval) = problem.smooth(&cand) {
                let bound = y_eval.value + grad_y.dot(&diff) + 0.5 * l_try * diff.norm_squared();
                if eval.value <= bound + ROUNDING * bound.abs().max(1.0) {
                    accepted = Some((cand, eval));
                    break;
                }
            }
            l_try /= config.ls_beta;
        }
        let Some((x_new, x_new_eval)) = accepted else {
            break;
        };
        lipschitz = l_try;
        let f_new = x_new_eval.value + problem.penalty(&x_new);

        if f_new > fx + ROUNDING * fx.abs().max(1.0) {
            // Momentum overshot: restart from the last iterate. Increases
            // within rounding are ignored, since near the optimum they are
            // noise and restarting on them stalls the iteration.
            t = 1.0;
            y = x.clone();
            y_eval = problem.smooth(&y)?;
            trace.records.push(IterRecord {
                iter,
                objective: fx,
                active_set: active_count(&x),
                step_size: 1.0 / lipschitz,
                flops: 0.0,
            });
            continue;
        }

        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_new;
        let y_new: DVector<f64> = &x_new + (&x_new - &x) * momentum;
        let f_prev = fx;
        grad_x = problem.gradient(&x_new_eval);
        x = x_new;
        fx = f_new;
        t = t_new;
        trace.records.push(IterRecord {
            iter,
            objective: fx,
            active_set: active_count(&x),
            step_size: 1.0 / lipschitz,
            flops: 0.0,
        });

        if stop.small_change(f_prev, fx) && stop.kkt_ok(problem.kkt_residual(&x, &grad_x)) {
            converged = true;
            break;
        }
        y_eval = if momentum == 0.0 {
            x_new_eval
        } else {
            match problem.smooth(&y_new) {
                Ok(e) => e,
                Err(_) => {
                    t = 1.0;
                    problem.smooth(&x)?
                }
            }
        };
        y = if t == 1.0 { x.clone() } else { y_new };
    }
    if !converged {
        converged = stop.kkt_ok(problem.kkt_residual(&x, &grad_x));
    }
    finish(&problem, config, x, trace, converged)
}
