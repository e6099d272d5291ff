//! Pointwise standard errors and confidence bands for a fitted density.
//!
//! The delta method linearizes `p̂(x)` in the active coefficients:
//!
//! ```text
//! σ²(x) = p̂(x)² S(x)ᵀ Cov(β̂) S(x),    S(x) = φ_A(x) - E_β̂[φ_A]
//! Cov(β̂) = (1/n) R⁻¹ I_emp R⁻¹,        R = I_emp + c n^(-1/5) I
//! ```
//!
//! where `I_emp` is the empirical information over the active set `A`. The
//! ridge keeps the inverse stable when active basis functions are nearly
//! collinear, and vanishes as the sample grows.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{centered_scores, FittedDensity};
use crate::seeds::derive_seed;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Pointwise density estimates with z-intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityBand {
    pub grid_points: Vec<f64>,
    pub density: Vec<f64>,
    pub se: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DensityBand {
    fn from_se(grid_points: Vec<f64>, density: Vec<f64>, se: Vec<f64>, clip: bool) -> Self {
        let lo = density
            .iter()
            .zip(&se)
            .map(|(d, s)| {
                let v = d - Z_95 * s;
                if clip {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect();
        let hi = density.iter().zip(&se).map(|(d, s)| d + Z_95 * s).collect();
        Self {
            grid_points,
            density,
            se,
            lo,
            hi,
        }
    }

    pub fn len(&self) -> usize {
        self.grid_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid_points.is_empty()
    }

    /// Whether the interval at index `i` contains `value`.
    pub fn covers(&self, i: usize, value: f64) -> bool {
        self.lo[i] <= value && value <= self.hi[i]
    }

    /// CSV `x,density,se,lo,hi`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "density", "se", "lo", "hi"])?;
        for i in 0..self.len() {
            w.write_record([
                self.grid_points[i].to_string(),
                self.density[i].to_string(),
                self.se[i].to_string(),
                self.lo[i].to_string(),
                self.hi[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What the ridge `c n^(-1/5)` is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgeScale {
    /// Added to the diagonal as is.
    Absolute,
    /// Multiplies each diagonal entry of the information, which is the
    /// absolute ridge applied to standardized basis columns.
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaConfig {
    /// Ridge multiplier `c` in `c n^(-1/5)`.
    pub ridge_constant: f64,
    pub ridge_scale: RidgeScale,
    /// Clip lower limits at zero.
    pub clip: bool,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        Self {
            ridge_constant: 1e-3,
            ridge_scale: RidgeScale::Diagonal,
            clip: false,
        }
    }
}

/// `c · n^(-1/5)`.
pub fn ridge_size(c: f64, n: usize) -> f64 {
    c * (n as f64).powf(-0.2)
}

/// `m` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect(),
    }
}

/// Active coefficients, excluding the intercept whose score is identically zero.
fn inference_columns(fit: &FittedDensity) -> Vec<usize> {
    let intercept = fit.spec().intercept_index();
    fit.active_set().into_iter().filter(|&j| Some(j) != intercept).collect()
}

/// Sandwich covariance of the active coefficients. Returns the columns used
/// and the `|A| × |A|` matrix.
pub fn coefficient_covariance(
    fit: &FittedDensity,
    data: &[f64],
    config: &DeltaConfig,
) -> Result<(Vec<usize>, DMatrix<f64>)> {
    if data.len() < 2 {
        return Err(invalid("standard errors need at least two observations"));
    }
    let cols = inference_columns(fit);
    if cols.is_empty() {
        return Ok((cols, DMatrix::zeros(0, 0)));
    }
    let n = data.len();
    let model = fit.model();
    let mean = model.expected_basis(&fit.grid_masses());
    let scores = centered_scores(fit.spec(), data, &mean, Some(&cols))?;
    let info = scores.tr_mul(&scores) / n as f64;
    let mut ridged = info.clone();
    let ridge = ridge_size(config.ridge_constant, n);
    for j in 0..cols.len() {
        ridged[(j, j)] += match config.ridge_scale {
            RidgeScale::Absolute => ridge,
            RidgeScale::Diagonal => ridge * info[(j, j)],
        };
    }
    let chol = ridged
        .cholesky()
        .ok_or_else(|| Error::DegenerateInformation("ridged information is not positive definite".into()))?;
    let inv = chol.inverse();
    let mut cov = &inv * info * &inv / n as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInformation("non-finite covariance".into()));
    }
    Ok((cols, cov))
}

/// Delta-method band on `x_grid`.
pub fn delta_method_se(fit: &FittedDensity, data: &[f64], x_grid: &[f64], config: &DeltaConfig) -> Result<DensityBand> {
    let density = fit.densities(x_grid)?;
    let (cols, cov) = coefficient_covariance(fit, data, config)?;
    if cols.is_empty() {
        return Ok(DensityBand::from_se(x_grid.to_vec(), density, vec![0.0; x_grid.len()], config.clip));
    }
    let model = fit.model();
    let mean = model.expected_basis(&fit.grid_masses());
    let s = centered_scores(fit.spec(), x_grid, &mean, Some(&cols))?;
    let sc = &s * &cov;
    let se = (0..x_grid.len())
        .map(|i| {
            let q = sc.row(i).dot(&s.row(i)).max(0.0);
            density[i] * q.sqrt()
        })
        .collect();
    Ok(DensityBand::from_se(x_grid.to_vec(), density, se, config.clip))
}

/// Bootstrap band together with the number of discarded refits.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapBand {
    pub band: DensityBand,
    pub dropped: usize,
    pub replicates: usize,
}

/// Nonparametric bootstrap: refits `recipe` on `b` resamples drawn with
/// replacement and reports the pointwise standard deviation of the refitted
/// densities around the fit on the original sample.
pub fn bootstrap_se<F>(data: &[f64], recipe: F, b: usize, seed: u64, x_grid: &[f64]) -> Result<BootstrapBand>
where
    F: Fn(&[f64]) -> Result<FittedDensity> + Sync,
{
    if b < 2 {
        return Err(invalid("the bootstrap needs at least two resamples"));
    }
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let base = recipe(data)?;
    let density = base.densities(x_grid)?;
    let curves: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64]));
            let resample: Vec<f64> = (0..data.len()).map(|_| data[rng.random_range(0..data.len())]).collect();
            match recipe(&resample).and_then(|f| f.densities(x_grid)) {
                Ok(c) => Some(c),
                Err(e) => {
                    log::debug!("bootstrap refit {r} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let ok: Vec<&Vec<f64>> = curves.iter().flatten().collect();
    let dropped = b - ok.len();
    if 2 * dropped > b {
        return Err(Error::TooManyFailures { failed: dropped, total: b });
    }
    if ok.len() < 2 {
        return Err(Error::TooManyFailures { failed: dropped, total: b });
    }
    let m = ok.len() as f64;
    let se = (0..x_grid.len())
        .map(|i| {
            let mean = ok.iter().map(|c| c[i]).sum::<f64>() / m;
            (ok.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect();
    Ok(BootstrapBand {
        band: DensityBand::from_se(x_grid.to_vec(), density, se, false),
        dropped,
        replicates: b,
    })
}

/// Symmetric eigenvalues, smallest first.
pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut v: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    DVector::from_vec(v)
}
