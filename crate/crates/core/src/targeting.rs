//! Plug-in and targeted estimation of moments, survival probabilities and
//! quantiles.
//!
//! A targeted density is the fitted log-spline plus a sum of fluctuation
//! terms `ε_t h_t`. Each direction `h_t` is the efficient influence curve of
//! the estimand under the current density (constants dropped), tabulated as
//! bin averages on the quadrature grid and evaluated exactly at the data.
//! Because the estimand itself is read off the same tabulation, solving the
//! one-dimensional score equation for `ε` makes the targeted moment or
//! survival estimate coincide with its empirical counterpart.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dgp::DgpSpec;
use crate::error::{invalid, Error, Result};
use crate::inference::Z_95;
use crate::model::{FittedDensity, GridEval, LogSplineModel, QuadratureGrid};

/// Bin densities below this make a quantile's influence curve undefined.
const FLAT_DENSITY: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimandSpec {
    /// `E[X^order]`.
    Moment { order: u32 },
    /// `P(X > x0)`.
    Survival { x0: f64 },
    /// `P(X ≤ x0)`.
    Cdf { x0: f64 },
    /// `F⁻¹(q)`.
    Quantile { q: f64 },
}

impl EstimandSpec {
    pub const MEAN: EstimandSpec = EstimandSpec::Moment { order: 1 };
    pub const MEDIAN: EstimandSpec = EstimandSpec::Quantile { q: 0.5 };

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        match *self {
            EstimandSpec::Moment { order } if order >= 1 => Ok(()),
            EstimandSpec::Moment { .. } => Err(invalid("moment order must be at least 1")),
            EstimandSpec::Survival { x0 } | EstimandSpec::Cdf { x0 } if open_unit(x0) => Ok(()),
            EstimandSpec::Survival { .. } | EstimandSpec::Cdf { .. } => Err(invalid("x0 must lie in (0, 1)")),
            EstimandSpec::Quantile { q } if open_unit(q) => Ok(()),
            EstimandSpec::Quantile { .. } => Err(invalid("quantile level must lie in (0, 1)")),
        }
    }

    /// Short label such as `mean`, `moment:2`, `survival:0.5` or `median`.
    pub fn label(&self) -> String {
        self.to_string()
    }

    /// Population value under a reference DGP.
    pub fn truth(&self, dgp: &DgpSpec) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            EstimandSpec::Moment { order: 1 } => dgp.population_truth().mean,
            EstimandSpec::Moment { order: 2 } => dgp.population_truth().second_moment,
            EstimandSpec::Moment { order } => {
                let m = 1_000_000;
                (0..m)
                    .map(|i| {
                        let x = (i as f64 + 0.5) / m as f64;
                        x.powi(order as i32) * dgp.density(x).unwrap_or(0.0)
                    })
                    .sum::<f64>()
                    / m as f64
            }
            EstimandSpec::Survival { x0 } => 1.0 - dgp.cdf(x0),
            EstimandSpec::Cdf { x0 } => dgp.cdf(x0),
            EstimandSpec::Quantile { q } => dgp.quantile(q)?,
        })
    }

    /// The classical efficient estimator computed directly from a sample:
    /// sample moment, empirical survival or CDF fraction, or sample quantile.
    pub fn classical_estimate(&self, data: &[f64]) -> Result<f64> {
        self.validate()?;
        if data.is_empty() {
            return Err(Error::NoData);
        }
        let n = data.len() as f64;
        Ok(match *self {
            EstimandSpec::Moment { order } => data.iter().map(|x| x.powi(order as i32)).sum::<f64>() / n,
            EstimandSpec::Survival { x0 } => data.iter().filter(|&&x| x > x0).count() as f64 / n,
            EstimandSpec::Cdf { x0 } => data.iter().filter(|&&x| x <= x0).count() as f64 / n,
            EstimandSpec::Quantile { q } => sample_quantile(data, q),
        })
    }
}

/// Sample quantile with linear interpolation between order statistics
/// (for `q = 0.5` the usual sample median).
pub fn sample_quantile(data: &[f64], q: f64) -> f64 {
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl fmt::Display for EstimandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            EstimandSpec::Moment { order: 1 } => write!(f, "mean"),
            EstimandSpec::Moment { order } => write!(f, "moment:{order}"),
            EstimandSpec::Survival { x0 } => write!(f, "survival:{x0}"),
            EstimandSpec::Cdf { x0 } => write!(f, "cdf:{x0}"),
            EstimandSpec::Quantile { q } if q == 0.5 => write!(f, "median"),
            EstimandSpec::Quantile { q } => write!(f, "quantile:{q}"),
        }
    }
}

impl FromStr for EstimandSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid(format!("malformed estimand '{s}'"));
        let spec = match s.split_once(':') {
            None => match s {
                "mean" => EstimandSpec::MEAN,
                "median" => EstimandSpec::MEDIAN,
                "second_moment" => EstimandSpec::Moment { order: 2 },
                _ => return Err(bad()),
            },
            Some((kind, arg)) => match kind {
                "moment" => EstimandSpec::Moment {
                    order: arg.parse().map_err(|_| bad())?,
                },
                "survival" => EstimandSpec::Survival {
                    x0: arg.parse().map_err(|_| bad())?,
                },
                "cdf" => EstimandSpec::Cdf {
                    x0: arg.parse().map_err(|_| bad())?,
                },
                "quantile" => EstimandSpec::Quantile {
                    q: arg.parse().map_err(|_| bad())?,
                },
                _ => return Err(bad()),
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Cumulative quadrature masses: `cum[g]` is the mass strictly below bin `g`.
fn cumulative(masses: &DVector<f64>) -> Vec<f64> {
    let mut cum = Vec::with_capacity(masses.len() + 1);
    let mut acc = 0.0;
    cum.push(0.0);
    for &m in masses.iter() {
        acc += m;
        cum.push(acc);
    }
    cum
}

/// CDF implied by bin masses spread uniformly within each bin.
fn quadrature_cdf(grid: &QuadratureGrid, masses: &DVector<f64>, x: f64) -> f64 {
    let g = grid.bin_of(x);
    let below: f64 = masses.iter().take(g).sum();
    below + grid.fraction_below(g, x) * masses[g]
}

/// Inverts the piecewise-linear quadrature CDF. Returns the quantile and the
/// bin density there.
fn quadrature_quantile(grid: &QuadratureGrid, masses: &DVector<f64>, q: f64) -> Result<(f64, f64)> {
    let cum = cumulative(masses);
    let total = *cum.last().unwrap();
    let target = q * total;
    let g = cum.partition_point(|&c| c < target).saturating_sub(1).min(grid.len() - 1);
    let mass = masses[g];
    let width = grid.widths()[g];
    let density = mass / width / total;
    if !(density > FLAT_DENSITY) {
        return Err(Error::FlatCdf(q));
    }
    let edges = grid.edges();
    let x = edges[g] + (target - cum[g]) / mass * width;
    Ok((x.clamp(edges[g], edges[g + 1]), density))
}

/// Estimand function tabulated on the grid as bin averages (midpoint values
/// for moments, fractional coverage for indicators).
fn tabulate(grid: &QuadratureGrid, spec: &EstimandSpec, quantile: f64) -> DVector<f64> {
    let g = grid.len();
    match *spec {
        EstimandSpec::Moment { order } => {
            DVector::from_iterator(g, grid.midpoints().iter().map(|m| m.powi(order as i32)))
        }
        EstimandSpec::Survival { x0 } => DVector::from_fn(g, |i, _| 1.0 - grid.fraction_below(i, x0)),
        EstimandSpec::Cdf { x0 } => DVector::from_fn(g, |i, _| grid.fraction_below(i, x0)),
        EstimandSpec::Quantile { .. } => DVector::from_fn(g, |i, _| grid.fraction_below(i, quantile)),
    }
}

/// The estimand function at a single point (the `h` direction at data).
fn pointwise(spec: &EstimandSpec, quantile: f64, x: f64) -> f64 {
    match *spec {
        EstimandSpec::Moment { order } => x.powi(order as i32),
        EstimandSpec::Survival { x0 } => f64::from(x > x0),
        EstimandSpec::Cdf { x0 } => f64::from(x <= x0),
        EstimandSpec::Quantile { .. } => f64::from(x < quantile),
    }
}

/// Estimand value and the pieces needed for its influence curve, under one
/// set of quadrature masses.
#[derive(Debug, Clone, Copy)]
struct Evaluated {
    value: f64,
    /// Quantile location (quantile kind only).
    location: f64,
    /// Density at the quantile (quantile kind only).
    density: f64,
}

fn evaluate(grid: &QuadratureGrid, masses: &DVector<f64>, spec: &EstimandSpec) -> Result<Evaluated> {
    match *spec {
        EstimandSpec::Quantile { q } => {
            let (x, density) = quadrature_quantile(grid, masses, q)?;
            Ok(Evaluated {
                value: x,
                location: x,
                density,
            })
        }
        _ => Ok(Evaluated {
            value: tabulate(grid, spec, 0.0).dot(masses),
            location: f64::NAN,
            density: f64::NAN,
        }),
    }
}

fn influence(spec: &EstimandSpec, ev: &Evaluated, x: f64) -> f64 {
    match *spec {
        EstimandSpec::Quantile { q } => (q - f64::from(x < ev.location)) / ev.density,
        _ => pointwise(spec, ev.location, x) - ev.value,
    }
}

/// Plug-in estimate from the fitted density.
pub fn plugin_estimate(fit: &FittedDensity, spec: &EstimandSpec) -> Result<f64> {
    spec.validate()?;
    Ok(evaluate(fit.grid(), &fit.grid_masses(), spec)?.value)
}

/// Quadrature CDF of the fit at `x`.
pub fn fitted_cdf(fit: &FittedDensity, x: f64) -> Result<f64> {
    crate::basis::check_support(x)?;
    Ok(quadrature_cdf(fit.grid(), &fit.grid_masses(), x))
}

/// Efficient influence curve of the estimand at `x` under the fit.
pub fn eic(fit: &FittedDensity, spec: &EstimandSpec, x: f64) -> Result<f64> {
    spec.validate()?;
    crate::basis::check_support(x)?;
    let ev = evaluate(fit.grid(), &fit.grid_masses(), spec)?;
    Ok(influence(spec, &ev, x))
}

/// `E_f[D*]` under quadrature, using the grid tabulation of the estimand.
pub fn eic_mean_under_fit(fit: &FittedDensity, spec: &EstimandSpec) -> Result<f64> {
    let masses = fit.grid_masses();
    let ev = evaluate(fit.grid(), &masses, spec)?;
    let t = tabulate(fit.grid(), spec, ev.location);
    Ok(match *spec {
        EstimandSpec::Quantile { q } => (q - t.dot(&masses)) / ev.density,
        _ => t.dot(&masses) - ev.value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmleConfig {
    /// Steps taken even when the score equation already holds.
    pub min_steps: usize,
    pub max_steps: usize,
    /// Fluctuation search interval `[-eps_max, eps_max]`.
    pub eps_max: f64,
}

impl Default for TmleConfig {
    fn default() -> Self {
        Self {
            min_steps: 0,
            max_steps: 10,
            eps_max: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetingStep {
    pub eps: f64,
    /// `P_n D*` after the step.
    pub pn_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandReport {
    #[serde(flatten)]
    pub spec: EstimandSpec,
    pub plugin: f64,
    pub tmle: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub steps: Vec<TargetingStep>,
    pub final_score: f64,
    /// Whether `|P_n D*| ≤ σ_n / (√n log n)` held when targeting stopped.
    pub converged: bool,
    /// `D*(x_i)` after targeting.
    #[serde(skip)]
    pub eic_values: Vec<f64>,
}

impl EstimandReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `value ± 1.96 sd(D*) / √n` from the post-targeting influence curve.
pub fn eic_confidence_interval(report: &EstimandReport) -> Result<(f64, f64)> {
    let n = report.eic_values.len();
    if n < 2 {
        return Err(invalid("an influence-curve interval needs at least two observations"));
    }
    let se = sample_sd(&report.eic_values) / (n as f64).sqrt();
    Ok((report.tmle - Z_95 * se, report.tmle + Z_95 * se))
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// A fitted density plus accumulated fluctuation terms.
struct Fluctuated<'a> {
    model: LogSplineModel,
    data: &'a [f64],
    /// Log-density (unnormalized) on the grid midpoints.
    eta_grid: DVector<f64>,
    /// Log-density (unnormalized) at the data.
    eta_data: DVector<f64>,
}

impl<'a> Fluctuated<'a> {
    fn new(fit: &FittedDensity, data: &'a [f64]) -> Result<Self> {
        let model = fit.model();
        let eta_grid = model.grid_log_density(fit.beta());
        let eta_data = DVector::from_iterator(
            data.len(),
            data.iter().map(|&x| fit.log_density_unnormalized(x)).collect::<Result<Vec<_>>>()?,
        );
        Ok(Self {
            model,
            data,
            eta_grid,
            eta_data,
        })
    }

    fn grid_eval(&self, eps: f64, h_grid: &DVector<f64>) -> Result<GridEval> {
        self.model.normalize(&(&self.eta_grid + h_grid * eps))
    }

    fn current(&self) -> Result<GridEval> {
        self.model.normalize(&self.eta_grid)
    }

    /// Summed log-likelihood of the data.
    fn log_likelihood(&self) -> Result<f64> {
        let log_c = self.current()?.log_c;
        Ok(self.eta_data.sum() - self.data.len() as f64 * log_c)
    }

    /// Solves `E_ε[h] = mean_i h(x_i)` for `ε` in `[-eps_max, eps_max]` by
    /// Newton steps safeguarded with bisection.
    fn solve_eps(&self, h_grid: &DVector<f64>, h_mean: f64, eps_max: f64) -> Result<f64> {
        // d/dε of the mean log-likelihood: h_mean - E_ε[h]; decreasing in ε.
        let slope = |eps: f64| -> Result<(f64, f64)> {
            let e = self.grid_eval(eps, h_grid)?;
            let mean = h_grid.dot(&e.masses);
            let second = h_grid.component_mul(h_grid).dot(&e.masses);
            Ok((h_mean - mean, (second - mean * mean).max(0.0)))
        };
        let (s0, v0) = slope(0.0)?;
        if s0 == 0.0 || v0 == 0.0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (-eps_max, eps_max);
        let (s_lo, _) = slope(lo)?;
        let (s_hi, _) = slope(hi)?;
        if s_lo < 0.0 || s_hi > 0.0 {
            return Err(Error::BracketFailure(eps_max));
        }
        let mut eps = 0.0;
        let (mut s, mut v) = (s0, v0);
        for _ in 0..200 {
            if s > 0.0 {
                lo = eps;
            } else {
                hi = eps;
            }
            let newton = eps + s / v;
            eps = if v > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            let next = slope(eps)?;
            s = next.0;
            v = next.1;
            if s.abs() <= 1e-15 * h_mean.abs().max(1.0) || hi - lo <= 1e-15 {
                break;
            }
        }
        Ok(eps)
    }

    fn add(&mut self, eps: f64, h_grid: &DVector<f64>, h_data: &DVector<f64>) {
        self.eta_grid.axpy(eps, h_grid, 1.0);
        self.eta_data.axpy(eps, h_data, 1.0);
    }
}

/// Iterative targeted update of `fit` toward the estimand.
pub fn tmle_target(
    fit: &FittedDensity,
    spec: &EstimandSpec,
    data: &[f64],
    config: &TmleConfig,
) -> Result<EstimandReport> {
    spec.validate()?;
    if data.len() < 2 {
        return Err(invalid("targeting needs at least two observations"));
    }
    let n = data.len() as f64;
    let plugin = plugin_estimate(fit, spec)?;
    let mut state = Fluctuated::new(fit, data)?;
    let grid = fit.grid().clone();
    let threshold = |d: &[f64]| sample_sd(d) / (n.sqrt() * n.ln());

    let mut steps = Vec::new();
    let mut loglik = state.log_likelihood()?;
    loop {
        let ev = evaluate(&grid, &state.current()?.masses, spec)?;
        let d: Vec<f64> = data.iter().map(|&x| influence(spec, &ev, x)).collect();
        let score = d.iter().sum::<f64>() / n;
        let done = score.abs() <= threshold(&d) && steps.len() >= config.min_steps;
        if done || steps.len() >= config.max_steps {
            let se = sample_sd(&d) / n.sqrt();
            if !done {
                log::warn!("targeting {spec} stopped after {} steps with P_n D* = {score:e}", steps.len());
            }
            return Ok(EstimandReport {
                spec: *spec,
                plugin,
                tmle: ev.value,
                se,
                ci: [ev.value - Z_95 * se, ev.value + Z_95 * se],
                steps,
                final_score: score,
                converged: done,
                eic_values: d,
            });
        }
        let h_grid = tabulate(&grid, spec, ev.location);
        let h_data = DVector::from_iterator(data.len(), data.iter().map(|&x| pointwise(spec, ev.location, x)));
        let eps = state.solve_eps(&h_grid, h_data.mean(), config.eps_max)?;
        state.add(eps, &h_grid, &h_data);
        let updated = state.log_likelihood()?;
        if updated < loglik - 1e-9 * loglik.abs().max(1.0) {
            log::warn!("targeting step lowered the log-likelihood from {loglik} to {updated}");
        }
        loglik = updated;
        let ev_next = evaluate(&grid, &state.current()?.masses, spec)?;
        let pn = data.iter().map(|&x| influence(spec, &ev_next, x)).sum::<f64>() / n;
        steps.push(TargetingStep { eps, pn_score: pn });
    }
}
