//! FLOP accounting for solver traces.
//!
//! A dense `a × b` matrix-vector product costs `2ab`. One objective-plus-
//! gradient evaluation touches the `n × K` sample design (or its column sums)
//! and the `G × K` grid design, so it is charged `2(n + G)K`. Newton steps add
//! `2GK²` for the Hessian and `2sK²` for coordinate descent over `s` active
//! coordinates. Line-search retries are charged one evaluation each.

use super::{Algorithm, SolverConfig, SolverTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopInputs {
    /// Sample size.
    pub n: usize,
    /// Number of quadrature bins.
    pub grid: usize,
    /// Basis dimension.
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopEstimate {
    pub per_iteration: Vec<f64>,
    pub cumulative: Vec<f64>,
}

/// Cost of one iteration with `active` active coordinates and `backtracks`
/// rejected line-search trials.
pub fn per_iteration_flops(algorithm: Algorithm, inputs: FlopInputs, active: usize, backtracks: usize) -> f64 {
    let k = inputs.dim as f64;
    let eval = 2.0 * (inputs.n + inputs.grid) as f64 * k;
    let retries = 1.0 + backtracks as f64;
    match algorithm {
        Algorithm::Fista | Algorithm::ProxAdagrad => eval,
        Algorithm::ProxNewton => {
            2.0 * inputs.grid as f64 * k * k + 2.0 * active as f64 * k * k + retries * eval
        }
        Algorithm::ProxNewtonLbfgs => retries * eval,
    }
}

/// Number of halvings implied by an accepted step, `round(log step / log ls_beta)`.
fn backtracks_from_step(step: f64, ls_beta: f64, ls_max: usize) -> usize {
    if !(step > 0.0) {
        return ls_max;
    }
    let l = (step.ln() / ls_beta.ln()).round();
    if l <= 0.0 {
        0
    } else {
        (l as usize).min(ls_max)
    }
}

pub fn estimate_flops(config: &SolverConfig, inputs: FlopInputs, trace: &SolverTrace) -> FlopEstimate {
    let per_iteration: Vec<f64> = trace
        .records
        .iter()
        .map(|r| {
            let backtracks = match config.algorithm {
                Algorithm::ProxNewton | Algorithm::ProxNewtonLbfgs => {
                    backtracks_from_step(r.step_size, config.ls_beta, config.ls_max)
                }
                _ => 0,
            };
            per_iteration_flops(config.algorithm, inputs, r.active_set, backtracks)
        })
        .collect();
    let cumulative = per_iteration
        .iter()
        .scan(0.0, |acc, f| {
            *acc += f;
            Some(*acc)
        })
        .collect();
    FlopEstimate {
        per_iteration,
        cumulative,
    }
}
