//! Trend-filtered density estimation on a uniform grid.
//!
//! The log-density is piecewise constant over `J` equal bins, `θ_0 = 0`
//! fixes the level, and the binned negative log-likelihood
//! `f(θ) = −Σ c_j θ_j + n log Σ exp(θ_j) Δx` is penalized by
//! `λ ‖D^(k+1) θ‖₁`. [`admm_fit`] splits the problem as `α = D^(k) θ`, so the
//! non-smooth part becomes a one-dimensional fused lasso solved exactly by
//! [`fused_lasso_prox`]. The TFPP variant penalizes a square matrix `H`
//! whose leading rows also cover the polynomial part, and its split uses a
//! plain soft-threshold.

mod admm;
mod cv;
mod lbfgs;
mod tv;


use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::check_support;
use crate::error::{invalid, Error, Result};

pub use admm::{admm_fit, AdmmConfig, AdmmResidual};
pub use cv::{cross_validate_tf, fit_tf_cv, TfCvPlan, TfCvRecord, TfCvResult};
pub use tv::fused_lasso_prox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TfVariant {
    /// Penalize `D^(k+1) θ` only.
    Standard,
    /// Penalize every row of `H`, including the polynomial block.
    ParametricPenalized,
}

/// `D^(k)` on `J` points: `(J − k) × J`, with `D^(1)` the forward difference
/// and `D^(k) = D^(1) D^(k−1)`.
pub fn difference_matrix(k: usize, j: usize) -> Result<DMatrix<f64>> {
    if k == 0 || k >= j {
        return Err(invalid(format!("difference order {k} needs 1 <= k < J = {j}")));
    }
    let mut d = DMatrix::identity(j, j);
    for r in 1..=k {
        let m = j - r + 1;
        let d1 = DMatrix::from_fn(m - 1, m, |row, col| {
            if col == row {
                -1.0
            } else if col == row + 1 {
                1.0
            } else {
                0.0
            }
        });
        d = d1 * d;
    }
    Ok(d)
}

/// First row of `D^(r)`: signed binomial coefficients on the first `r + 1`
/// entries.
fn leading_row(r: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 0..r {
        let mut next = vec![0.0; row.len() + 1];
        for (i, v) in row.iter().enumerate() {
            next[i] -= v;
            next[i + 1] += v;
        }
        row = next;
    }
    row
}

/// The square TFPP penalty matrix on a uniform grid: `e_1`, then the first
/// row of each `D^(r)` for `r = 1..k`, then all of `D^(k+1)`.
pub fn tfpp_matrix(k: usize, j: usize) -> Result<DMatrix<f64>> {
    if k + 1 >= j {
        return Err(invalid(format!("order {k} needs at least {} bins", k + 2)));
    }
    let mut h = DMatrix::zeros(j, j);
    h[(0, 0)] = 1.0;
    for r in 1..=k {
        for (c, v) in leading_row(r).into_iter().enumerate() {
            h[(r, c)] = v;
        }
    }
    let tail = difference_matrix(k + 1, j)?;
    h.rows_mut(k + 1, j - k - 1).copy_from(&tail);
    Ok(h)
}

/// `D^(k) x` by repeated differencing; `k = 0` copies.
pub(crate) fn diff(x: &[f64], k: usize) -> Vec<f64> {
    let mut v = x.to_vec();
    for _ in 0..k {
        v = v.windows(2).map(|w| w[1] - w[0]).collect();
    }
    v
}

/// `D^(k)ᵀ y`, the adjoint of [`diff`], onto `len` entries.
pub(crate) fn diff_transpose(y: &[f64], k: usize) -> Vec<f64> {
    let mut v = y.to_vec();
    for _ in 0..k {
        let m = v.len();
        let mut out = vec![0.0; m + 1];
        for (i, &val) in v.iter().enumerate() {
            out[i] -= val;
            out[i + 1] += val;
        }
        debug_assert_eq!(out.len(), m + 1);
        v = out;
    }
    v
}

/// The penalized linear map of each variant, applied without forming the
/// matrix.
#[derive(Debug, Clone)]
pub(crate) struct PenaltyMap {
    variant: TfVariant,
    order: usize,
    leading: Vec<Vec<f64>>,
}

impl PenaltyMap {
    pub(crate) fn new(variant: TfVariant, order: usize) -> Self {
        Self {
            variant,
            order,
            leading: (1..=order).map(leading_row).collect(),
        }
    }

    /// The ADMM split `α = A θ`: `D^(k)` for the standard variant, `H` for
    /// TFPP.
    pub(crate) fn split(&self, theta: &[f64]) -> Vec<f64> {
        match self.variant {
            TfVariant::Standard => diff(theta, self.order),
            TfVariant::ParametricPenalized => self.h(theta),
        }
    }

    pub(crate) fn split_transpose(&self, alpha: &[f64]) -> Vec<f64> {
        match self.variant {
            TfVariant::Standard => diff_transpose(alpha, self.order),
            TfVariant::ParametricPenalized => self.h_transpose(alpha),
        }
    }

    /// The vector whose L1 norm is penalized.
    pub(crate) fn penalized(&self, theta: &[f64]) -> Vec<f64> {
        match self.variant {
            TfVariant::Standard => diff(theta, self.order + 1),
            TfVariant::ParametricPenalized => self.h(theta),
        }
    }

    fn h(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(theta.len());
        out.push(theta[0]);
        for row in &self.leading {
            out.push(row.iter().zip(theta).map(|(a, b)| a * b).sum());
        }
        out.extend(diff(theta, self.order + 1));
        out
    }

    fn h_transpose(&self, y: &[f64]) -> Vec<f64> {
        let k = self.order;
        let mut out = diff_transpose(&y[k + 1..], k + 1);
        out[0] += y[0];
        for (r, row) in self.leading.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                out[c] += v * y[r + 1];
            }
        }
        out
    }
}

/// A trend-filtering density problem on `J` uniform bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfProblem {
    counts: Vec<f64>,
    n: f64,
    pub order: usize,
    pub lambda: f64,
    /// ADMM penalty parameter; defaults to `λ` (or 1 when `λ = 0`).
    pub rho: f64,
    pub variant: TfVariant,
}

/// Bin of `x` on `J` uniform bins; the last bin is closed.
pub fn bin_index(x: f64, bins: usize) -> usize {
    ((x * bins as f64).floor() as usize).min(bins - 1)
}

/// Histogram counts on `J` uniform bins.
pub fn bin_counts(data: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(invalid("at least one bin is required"));
    }
    let mut counts = vec![0.0; bins];
    for &x in data {
        check_support(x)?;
        counts[bin_index(x, bins)] += 1.0;
    }
    Ok(counts)
}

impl TfProblem {
    /// Bins the sample on `bins` equal bins (default `n + 1`).
    pub fn new(data: &[f64], bins: Option<usize>, order: usize, lambda: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::NoData);
        }
        let counts = bin_counts(data, bins.unwrap_or(data.len() + 1))?;
        Self::from_counts(counts, order, lambda)
    }

    pub fn from_counts(counts: Vec<f64>, order: usize, lambda: f64) -> Result<Self> {
        if order > 2 {
            return Err(invalid("trend-filter order must be 0, 1 or 2"));
        }
        if counts.len() < order + 2 {
            return Err(invalid(format!("order {order} needs at least {} bins", order + 2)));
        }
        if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(invalid("bin counts must be finite and non-negative"));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid("lambda must be finite and non-negative"));
        }
        let n = counts.iter().sum::<f64>();
        if n <= 0.0 {
            return Err(Error::NoData);
        }
        Ok(Self {
            counts,
            n,
            order,
            lambda,
            rho: if lambda > 0.0 { lambda } else { 1.0 },
            variant: TfVariant::Standard,
        })
    }

    /// The same problem with the polynomial block penalized as well.
    pub fn tfpp_variant(mut self) -> Self {
        self.variant = TfVariant::ParametricPenalized;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self.rho = if lambda > 0.0 { lambda } else { 1.0 };
        self
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn n(&self) -> f64 {
        self.n
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> f64 {
        1.0 / self.bins() as f64
    }

    pub(crate) fn map(&self) -> PenaltyMap {
        PenaltyMap::new(self.variant, self.order)
    }

    /// `λ ‖D^(k+1) θ‖₁` (or `λ ‖H θ‖₁` for TFPP).
    pub fn penalty(&self, theta: &[f64]) -> f64 {
        self.lambda * self.map().penalized(theta).iter().map(|v| v.abs()).sum::<f64>()
    }

    pub fn objective(&self, theta: &[f64]) -> Result<f64> {
        Ok(binned_nll(self, theta)? + self.penalty(theta))
    }
}

/// `log Z(θ) = log Σ exp(θ_j) Δx` by log-sum-exp.
pub fn log_partition(theta: &[f64], width: f64) -> f64 {
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + theta.iter().map(|t| (t - max).exp()).sum::<f64>().ln() + width.ln()
}

/// `−Σ c_j θ_j + n log Z(θ)`.
pub fn binned_nll(problem: &TfProblem, theta: &[f64]) -> Result<f64> {
    if theta.len() != problem.bins() {
        return Err(invalid(format!("theta has {} entries for {} bins", theta.len(), problem.bins())));
    }
    if theta[0] != 0.0 {
        return Err(invalid("theta_0 must be pinned at 0"));
    }
    let log_z = log_partition(theta, problem.width());
    if !log_z.is_finite() {
        return Err(Error::DivergedCoefficients);
    }
    let fit: f64 = problem.counts.iter().zip(theta).map(|(c, t)| c * t).sum();
    Ok(-fit + problem.n * log_z)
}

/// A trend-filter fit: bin log-densities plus the ADMM record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfFit {
    pub problem: TfProblem,
    pub theta: Vec<f64>,
    /// Split variable after the final proximal step; exactly sparse in the
    /// penalized differences.
    pub alpha: Vec<f64>,
    pub log_z: f64,
    pub iterations: usize,
    /// Quasi-Newton iterations summed over all θ-steps.
    pub inner_iterations: usize,
    pub converged: bool,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub residuals: Vec<AdmmResidual>,
}

impl TfFit {
    pub fn bins(&self) -> usize {
        self.theta.len()
    }

    pub fn density_at(&self, x: f64) -> Result<f64> {
        check_support(x)?;
        Ok((self.theta[bin_index(x, self.bins())] - self.log_z).exp())
    }

    pub fn densities(&self, xs: &[f64]) -> Result<Vec<f64>> {
        xs.iter().map(|&x| self.density_at(x)).collect()
    }

    /// Bin densities `exp(θ_j) / Z`.
    pub fn bin_densities(&self) -> Vec<f64> {
        self.theta.iter().map(|t| (t - self.log_z).exp()).collect()
    }

    /// Probability of each bin; sums to one.
    pub fn bin_masses(&self) -> Vec<f64> {
        let w = 1.0 / self.bins() as f64;
        self.bin_densities().into_iter().map(|d| d * w).collect()
    }

    pub fn objective(&self) -> Result<f64> {
        self.problem.objective(&self.theta)
    }

    /// Held-out negative log-likelihood of `data` under this fit.
    pub fn holdout_nll(&self, data: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for &x in data {
            total -= self.density_at(x)?.ln();
        }
        Ok(total)
    }

    /// Number of nonzero penalized differences in the split variable: the
    /// jumps of a piecewise-constant fit for `k = 0`.
    pub fn active_differences(&self) -> usize {
        let penalized = match self.problem.variant {
            TfVariant::Standard => diff(&self.alpha, 1),
            TfVariant::ParametricPenalized => self.alpha.clone(),
        };
        penalized.iter().filter(|v| v.abs() > 1e-10).count()
    }

    pub fn final_residual(&self) -> Option<AdmmResidual> {
        self.residuals.last().copied()
    }

    /// `bin_left,bin_right,count,theta,density`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_left", "bin_right", "count", "theta", "density"])?;
        let j = self.bins() as f64;
        for (i, (t, d)) in self.theta.iter().zip(self.bin_densities()).enumerate() {
            w.write_record([
                (i as f64 / j).to_string(),
                ((i + 1) as f64 / j).to_string(),
                self.problem.counts[i].to_string(),
                t.to_string(),
                d.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
