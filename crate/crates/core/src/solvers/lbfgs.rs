//! Proximal quasi-Newton with a memory-one scaled-identity curvature model.
//!
//! The inverse Hessian is approximated by `γ I` with `γ = sᵀy / yᵀy` from the
//! most recent pair of iterate and gradient differences, so the scaled
//! subproblem is a single soft-threshold. Only `s`, `y` and the current
//! iterate are kept between iterations.

use nalgebra::DVector;

use super::{active_count, finish, IterRecord, Problem, SolverConfig, SolverTrace, Stopping, ARMIJO, ROUNDING};
use crate::error::Result;
use crate::model::{DataSummary, FittedDensity, LogSplineModel};

/// Curvature pair kept between iterations.
struct Memory {
    s: DVector<f64>,
    y: DVector<f64>,
}

impl Memory {
    /// `sᵀy / yᵀy`, or `None` when the pair carries no usable curvature.
    fn gamma(&self) -> Option<f64> {
        let sy = self.s.dot(&self.y);
        let yy = self.y.norm_squared();
        (sy > 0.0 && yy > 0.0).then(|| sy / yy).filter(|g| g.is_finite())
    }
}

pub fn fit_prox_newton_lbfgs(
    model: &LogSplineModel,
    data: &DataSummary,
    config: &SolverConfig,
) -> Result<FittedDensity> {
    let problem = Problem::new(model, data, config)?;
    let stop = Stopping::new(config);
    let mut x = problem.initial_point(config)?;
    let mut eval = problem.smooth(&x)?;
    let mut penalty = problem.penalty(&x);
    let mut fx = eval.value + penalty;
    let mut grad = problem.gradient(&eval);
    let mut memory: Option<Memory> = None;

    let mut trace = SolverTrace::default();
    let mut converged = false;

    for iter in 1..=config.max_iters {
        let gamma = memory.as_ref().and_then(Memory::gamma).unwrap_or(1.0);
        let z = problem.prox_step(&x, &grad, &|_| gamma);
        let d = &z - &x;
        let delta = grad.dot(&d) + problem.penalty(&z) - penalty;

        let mut t = 1.0;
        let mut accepted = None;
        if delta < 0.0 {
            for _ in 0..config.ls_max {
                let cand: DVector<f64> = &x + &d * t;
                if let Ok(e) = problem.smooth(&cand) {
                    let pen = problem.penalty(&cand);
                    if e.value + pen <= fx + ARMIJO * t * delta + ROUNDING * fx.abs().max(1.0) {
                        accepted = Some((cand, e, pen));
                        break;
                    }
                }
                t *= config.ls_beta;
            }
        }
        let Some((x_new, e_new, pen_new)) = accepted else {
            // No descent along the scaled proximal direction.
            trace.records.push(IterRecord {
                iter,
                objective: fx,
                active_set: active_count(&x),
                step_size: 0.0,
                flops: 0.0,
            });
            break;
        };
        let grad_new = problem.gradient(&e_new);
        memory = Some(Memory {
            s: &x_new - &x,
            y: &grad_new - &grad,
        });
        let f_prev = fx;
        x = x_new;
        eval = e_new;
        penalty = pen_new;
        fx = eval.value + penalty;
        grad = grad_new;
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
    if !converged {
        converged = stop.kkt_ok(problem.kkt_residual(&x, &grad));
    }
    finish(&problem, config, x, trace, converged)
}
