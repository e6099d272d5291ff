//! Solvers for the L1-penalized log-spline likelihood
//!
//! ```text
//! minimize  F(β) = -βᵀ Σ_i φ(x_i) + n log C(β) + λ Σ_j w_j |β_j|
//! ```
//!
//! with `w_j = 1` for penalized columns and `w_j = 0` for the polynomial
//! block when [`SolverConfig::penalize_parametric`] is off. The intercept is
//! absorbed by the normalizer and is held at zero.

mod adagrad;
mod fista;
mod flops;
mod lbfgs;
mod newton;

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{DataSummary, FittedDensity, GridEval, LogSplineModel, Penalty};

pub use adagrad::fit_prox_adagrad;
pub use fista::fit_fista;
pub use flops::{estimate_flops, per_iteration_flops, FlopEstimate, FlopInputs};
pub use lbfgs::fit_prox_newton_lbfgs;
pub use newton::fit_prox_newton;

/// Coefficients with magnitude above this count as active knots.
pub const ACTIVE_THRESHOLD: f64 = 1e-8;

/// Sufficient-decrease constant for the Armijo line searches.
const ARMIJO: f64 = 1e-4;

/// Relative slack for comparisons of objective values, which carry rounding
/// from sums that cancel. Near the optimum the true decrease falls below it
/// and the gradient, which is computed accurately, has to drive progress.
const ROUNDING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fista,
    ProxAdagrad,
    ProxNewton,
    ProxNewtonLbfgs,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Fista,
        Algorithm::ProxAdagrad,
        Algorithm::ProxNewton,
        Algorithm::ProxNewtonLbfgs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fista => "fista",
            Algorithm::ProxAdagrad => "prox_adagrad",
            Algorithm::ProxNewton => "prox_newton",
            Algorithm::ProxNewtonLbfgs => "prox_newton_lbfgs",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| invalid(format!("unknown solver '{s}'")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    /// Weight of the L1 penalty.
    pub lambda: f64,
    pub max_iters: usize,
    /// Relative objective change below which an iterate may stop.
    pub tol: f64,
    /// Largest allowed KKT violation, per observation, at a stopping point.
    pub kkt_tol: f64,
    /// Backtracking shrink factor.
    pub ls_beta: f64,
    /// Maximum objective evaluations per line search.
    pub ls_max: usize,
    /// Coordinate-descent sweeps per Newton step.
    pub cd_passes: usize,
    /// Diagonal jitter added to the Hessian.
    pub ridge_h: f64,
    pub warm_start: Option<DVector<f64>>,
    pub penalize_parametric: bool,
    /// Initial per-coordinate step scale for proximal AdaGrad.
    pub base_step: f64,
    /// Floor added to the AdaGrad preconditioner.
    pub adagrad_eps: f64,
}

impl SolverConfig {
    pub fn new(algorithm: Algorithm, lambda: f64) -> Self {
        let max_iters = match algorithm {
            Algorithm::ProxNewton => 200,
            Algorithm::ProxNewtonLbfgs => 20_000,
            Algorithm::Fista | Algorithm::ProxAdagrad => 50_000,
        };
        Self {
            algorithm,
            lambda,
            max_iters,
            tol: 1e-9,
            kkt_tol: 1e-7,
            ls_beta: 0.5,
            ls_max: 60,
            cd_passes: 200,
            ridge_h: 1e-9,
            warm_start: None,
            penalize_parametric: true,
            base_step: 1.0,
            adagrad_eps: 1e-10,
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub fn with_warm_start(&self, beta: Option<DVector<f64>>) -> Self {
        Self {
            warm_start: beta,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid("lambda must be a finite non-negative number"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol must be positive"));
        }
        if !(self.ls_beta > 0.0 && self.ls_beta < 1.0) {
            return Err(invalid("ls_beta must lie in (0, 1)"));
        }
        if self.ls_max == 0 {
            return Err(invalid("ls_max must be positive"));
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::new(Algorithm::ProxNewton, 1.0)
    }
}

/// One row of a solver trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub active_set: usize,
    pub step_size: f64,
    pub flops: f64,
}

/// Per-iteration history of a fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverTrace {
    pub algorithm: Option<Algorithm>,
    pub records: Vec<IterRecord>,
}

impl SolverTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }

    /// CSV with header `iter,objective,active_set,step_size,flops`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "objective", "active_set", "step_size", "flops"])?;
        for r in &self.records {
            w.write_record([
                r.iter.to_string(),
                r.objective.to_string(),
                r.active_set.to_string(),
                r.step_size.to_string(),
                r.flops.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `sign(v) · max(|v| - t, 0)`.
#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub(crate) fn active_indices(beta: &DVector<f64>) -> Vec<usize> {
    beta.iter()
        .enumerate()
        .filter(|(_, b)| b.abs() > ACTIVE_THRESHOLD)
        .map(|(j, _)| j)
        .collect()
}

pub(crate) fn active_count(beta: &DVector<f64>) -> usize {
    beta.iter().filter(|b| b.abs() > ACTIVE_THRESHOLD).count()
}

/// Smooth part of the objective evaluated at a point.
pub(crate) struct SmoothEval {
    pub value: f64,
    pub grid: GridEval,
}

/// The penalized problem on a fixed model and sample.
pub(crate) struct Problem<'a> {
    pub model: &'a LogSplineModel,
    pub data: &'a DataSummary,
    pub lambda: f64,
    /// Penalty multiplier per coefficient (0 or 1).
    pub weights: Vec<f64>,
    /// Coefficients the solver may move.
    pub free: Vec<bool>,
}

impl<'a> Problem<'a> {
    pub fn new(model: &'a LogSplineModel, data: &'a DataSummary, config: &SolverConfig) -> Result<Self> {
        config.validate()?;
        let spec = model.spec();
        if data.sum_phi.len() != spec.dim() {
            return Err(invalid("data summary does not match the basis"));
        }
        let p = spec.num_parametric();
        let weights = (0..spec.dim())
            .map(|j| if j < p && !config.penalize_parametric { 0.0 } else { 1.0 })
            .collect();
        let mut free = vec![true; spec.dim()];
        if let Some(i) = spec.intercept_index() {
            free[i] = false;
        }
        Ok(Self {
            model,
            data,
            lambda: config.lambda,
            weights,
            free,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn n(&self) -> f64 {
        self.data.n as f64
    }

    pub fn initial_point(&self, config: &SolverConfig) -> Result<DVector<f64>> {
        let mut beta = match &config.warm_start {
            Some(b) if b.len() == self.dim() => b.clone(),
            Some(_) => return Err(invalid("warm start has the wrong dimension")),
            None => DVector::zeros(self.dim()),
        };
        self.project_fixed(&mut beta);
        Ok(beta)
    }

    pub fn project_fixed(&self, beta: &mut DVector<f64>) {
        for (b, &free) in beta.iter_mut().zip(&self.free) {
            if !free {
                *b = 0.0;
            }
        }
    }

    pub fn smooth(&self, beta: &DVector<f64>) -> Result<SmoothEval> {
        let grid = self.model.eval(beta)?;
        let value = -self.data.sum_phi.dot(beta) + self.n() * grid.log_c;
        Ok(SmoothEval { value, grid })
    }

    /// Gradient of the smooth part; zero on fixed coordinates.
    pub fn gradient(&self, eval: &SmoothEval) -> DVector<f64> {
        let mut g = self.model.expected_basis(&eval.grid.masses) * self.n() - &self.data.sum_phi;
        for (gj, &free) in g.iter_mut().zip(&self.free) {
            if !free {
                *gj = 0.0;
            }
        }
        g
    }

    pub fn penalty(&self, beta: &DVector<f64>) -> f64 {
        self.lambda
            * beta
                .iter()
                .zip(&self.weights)
                .map(|(b, w)| w * b.abs())
                .sum::<f64>()
    }

    pub fn objective(&self, beta: &DVector<f64>) -> Result<f64> {
        Ok(self.smooth(beta)?.value + self.penalty(beta))
    }

    /// Largest subgradient-condition violation, divided by `n`.
    pub fn kkt_residual(&self, beta: &DVector<f64>, grad: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.dim() {
            if !self.free[j] {
                continue;
            }
            let t = self.lambda * self.weights[j];
            let v = if beta[j].abs() > 0.0 {
                (grad[j] + t * beta[j].signum()).abs()
            } else {
                (grad[j].abs() - t).max(0.0)
            };
            worst = worst.max(v);
        }
        worst / self.n().max(1.0)
    }

    /// `prox_{step·λ‖·‖₁}(β - step·g)` coordinatewise, with per-coordinate steps.
    pub fn prox_step(&self, beta: &DVector<f64>, grad: &DVector<f64>, steps: &dyn Fn(usize) -> f64) -> DVector<f64> {
        let mut out = beta.clone();
        for j in 0..self.dim() {
            if !self.free[j] {
                continue;
            }
            let s = steps(j);
            out[j] = soft_threshold(beta[j] - s * grad[j], s * self.lambda * self.weights[j]);
        }
        out
    }
}

/// Tracks stopping conditions shared by all algorithms.
pub(crate) struct Stopping {
    tol: f64,
    kkt_tol: f64,
}

impl Stopping {
    pub fn new(config: &SolverConfig) -> Self {
        Self {
            tol: config.tol,
            kkt_tol: config.kkt_tol,
        }
    }

    pub fn small_change(&self, prev: f64, cur: f64) -> bool {
        (prev - cur).abs() <= self.tol * cur.abs().max(1.0)
    }

    pub fn kkt_ok(&self, residual: f64) -> bool {
        residual <= self.kkt_tol
    }
}

/// Builds the final [`FittedDensity`] and fills in the FLOP column.
pub(crate) fn finish(
    problem: &Problem<'_>,
    config: &SolverConfig,
    beta: DVector<f64>,
    mut trace: SolverTrace,
    converged: bool,
) -> Result<FittedDensity> {
    trace.algorithm = Some(config.algorithm);
    let inputs = FlopInputs {
        n: problem.data.n,
        grid: problem.model.grid().len(),
        dim: problem.dim(),
    };
    let flops = estimate_flops(config, inputs, &trace);
    for (rec, cum) in trace.records.iter_mut().zip(flops.cumulative) {
        rec.flops = cum;
    }
    if !converged {
        log::debug!(
            "{} stopped after {} iterations without meeting the stopping rule",
            config.algorithm,
            trace.len()
        );
    }
    FittedDensity::new(
        problem.model,
        beta,
        Penalty::Lambda { value: config.lambda },
        trace,
        converged,
    )
}

/// Fit with the algorithm named in the config.
pub fn fit(model: &LogSplineModel, data: &DataSummary, config: &SolverConfig) -> Result<FittedDensity> {
    match config.algorithm {
        Algorithm::Fista => fit_fista(model, data, config),
        Algorithm::ProxAdagrad => fit_prox_adagrad(model, data, config),
        Algorithm::ProxNewton => fit_prox_newton(model, data, config),
        Algorithm::ProxNewtonLbfgs => fit_prox_newton_lbfgs(model, data, config),
    }
}

/// Penalized objective `F(β)` at an arbitrary coefficient vector.
pub fn penalized_objective(
    model: &LogSplineModel,
    data: &DataSummary,
    config: &SolverConfig,
    beta: &DVector<f64>,
) -> Result<f64> {
    Problem::new(model, data, config)?.objective(beta)
}

/// Per-observation KKT violation of `beta` for the problem in `config`.
pub fn kkt_residual(
    model: &LogSplineModel,
    data: &DataSummary,
    config: &SolverConfig,
    beta: &DVector<f64>,
) -> Result<f64> {
    let problem = Problem::new(model, data, config)?;
    let eval = problem.smooth(beta)?;
    let grad = problem.gradient(&eval);
    Ok(problem.kkt_residual(beta, &grad))
}

/// Smallest λ for which `β = 0` satisfies the optimality conditions.
pub fn lambda_max(model: &LogSplineModel, data: &DataSummary, penalize_parametric: bool) -> Result<f64> {
    let config = SolverConfig {
        penalize_parametric,
        ..SolverConfig::new(Algorithm::ProxNewton, 0.0)
    };
    let problem = Problem::new(model, data, &config)?;
    let zero = DVector::zeros(problem.dim());
    let grad = problem.gradient(&problem.smooth(&zero)?);
    Ok((0..problem.dim())
        .filter(|&j| problem.free[j] && problem.weights[j] > 0.0)
        .map(|j| grad[j].abs())
        .fold(0.0, f64::max))
}

/// Fit under the L1 budget `‖β‖₁ ≤ bound` by bisecting the Lagrangian weight
/// on a log scale until the norm is within 1% of the budget.
pub fn fit_l1_bound(
    model: &LogSplineModel,
    data: &DataSummary,
    bound: f64,
    config: &SolverConfig,
) -> Result<FittedDensity> {
    if !(bound >= 0.0) {
        return Err(invalid("L1 bound must be non-negative"));
    }
    let wrap = |fit: FittedDensity| -> Result<FittedDensity> {
        let lambda = fit.penalty().lambda();
        FittedDensity::new(
            model,
            fit.beta().clone(),
            Penalty::Bound { value: bound, lambda },
            fit.trace().clone(),
            fit.converged(),
        )
    };
    let hi_lambda = lambda_max(model, data, config.penalize_parametric)?.max(1e-12);
    let hi = fit(model, data, &config.with_lambda(hi_lambda))?;
    if bound <= 0.0 || (hi.l1_norm() - bound).abs() <= 0.01 * bound {
        return wrap(hi);
    }
    // Find a small enough λ whose solution exceeds the budget.
    let mut lo_lambda = hi_lambda;
    let mut lo = hi.clone();
    let floor = hi_lambda * 1e-8;
    while lo.l1_norm() < bound {
        if lo_lambda <= floor {
            // The budget is not binding on this sample.
            return wrap(lo);
        }
        lo_lambda = (lo_lambda * 0.1).max(floor);
        lo = fit(model, data, &config.with_lambda(lo_lambda).with_warm_start(Some(lo.beta().clone())))?;
        if (lo.l1_norm() - bound).abs() <= 0.01 * bound {
            return wrap(lo);
        }
    }
    let (mut a, mut b) = (lo_lambda.ln(), (lo_lambda * 10.0).min(hi_lambda).ln());
    let mut best = lo;
    for _ in 0..80 {
        let mid = 0.5 * (a + b);
        let cand = fit(
            model,
            data,
            &config.with_lambda(mid.exp()).with_warm_start(Some(best.beta().clone())),
        )?;
        let norm = cand.l1_norm();
        let done = (norm - bound).abs() <= 0.01 * bound;
        if norm > bound {
            a = mid;
        } else {
            b = mid;
        }
        best = cand;
        if done {
            break;
        }
    }
    wrap(best)
}

#[cfg(test)]
mod tests;
