use serde::{Deserialize, Serialize};

use super::lbfgs;
use super::tv::fused_lasso_prox;
use super::{log_partition, TfFit, TfProblem, TfVariant};
use crate::error::{invalid, Result};
use crate::solvers::soft_threshold;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    pub max_iters: usize,
    /// Residual tolerances are `abs_tol √m` (primal) and `abs_tol √J` (dual).
    pub abs_tol: f64,
    /// θ-step stops when `‖∇‖∞ ≤ inner_tol · max(n, 1)` and the
    /// preconditioned step `‖M⁻¹∇‖∞ ≤ inner_tol`.
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub lbfgs_memory: usize,
    /// Starting log-densities (θ_0 is reset to 0).
    pub warm_start: Option<Vec<f64>>,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            abs_tol: 1e-4,
            inner_tol: 1e-8,
            inner_max_iters: 200,
            lbfgs_memory: 10,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmResidual {
    pub iter: usize,
    /// `‖α − A θ‖₂`.
    pub primal: f64,
    /// `ρ ‖Aᵀ(α − α_prev)‖₂`.
    pub dual: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cholesky factor of a symmetric positive definite band matrix, stored
/// row by row as the `b + 1` entries at and left of the diagonal.
struct BandCholesky {
    b: usize,
    rows: Vec<Vec<f64>>,
}

impl BandCholesky {
    /// Factors the matrix whose lower band is `rows[i][b - (i - j)] = M_ij`.
    fn factor(b: usize, mut rows: Vec<Vec<f64>>) -> Option<Self> {
        let dim = rows.len();
        for i in 0..dim {
            for j in i.saturating_sub(b)..=i {
                let mut s = rows[i][b + j - i];
                for k in i.saturating_sub(b)..j {
                    s -= rows[i][b + k - i] * rows[j][b + k - j];
                }
                if i == j {
                    if !(s > 0.0) {
                        return None;
                    }
                    rows[i][b] = s.sqrt();
                } else {
                    rows[i][b + j - i] = s / rows[j][b];
                }
            }
        }
        Some(Self { b, rows })
    }

    fn solve(&self, x: &mut [f64]) {
        let (b, dim) = (self.b, self.rows.len());
        for i in 0..dim {
            let mut s = x[i];
            for k in i.saturating_sub(b)..i {
                s -= self.rows[i][b + k - i] * x[k];
            }
            x[i] = s / self.rows[i][b];
        }
        for i in (0..dim).rev() {
            let mut s = x[i];
            for k in i + 1..(i + b + 1).min(dim) {
                s -= self.rows[k][b + i - k] * x[k];
            }
            x[i] = s / self.rows[i][b];
        }
    }
}

/// Lower band of `AᵀA` restricted to the free coordinates `1..J`.
fn gram_band(map: &super::PenaltyMap, j: usize, b: usize) -> Vec<Vec<f64>> {
    let mut rows = vec![vec![0.0; b + 1]; j - 1];
    let mut unit = vec![0.0; j];
    for col in 1..j {
        unit[col] = 1.0;
        let column = map.split_transpose(&map.split(&unit));
        unit[col] = 0.0;
        for row in col..(col + b + 1).min(j) {
            rows[row - 1][b + col - row] = column[row];
        }
    }
    rows
}

/// Fits the problem by ADMM. A fit that hits the iteration cap is returned
/// with `converged = false`.
pub fn admm_fit(problem: &TfProblem, config: &AdmmConfig) -> Result<TfFit> {
    if !(problem.rho > 0.0) {
        return Err(invalid("rho must be positive"));
    }
    let j = problem.bins();
    let map = problem.map();
    let n = problem.n();
    let width = problem.width();
    let counts = problem.counts();

    let mut theta = match &config.warm_start {
        Some(w) if w.len() == j => w.clone(),
        Some(w) => return Err(invalid(format!("warm start has {} entries for {j} bins", w.len()))),
        None => vec![0.0; j],
    };
    theta[0] = 0.0;
    let mut alpha = map.split(&theta);
    let m = alpha.len();
    let mut u = vec![0.0; m];
    let rho = problem.rho;
    let t = problem.lambda / rho;
    let eps_pri = config.abs_tol * (m as f64).sqrt();
    let eps_dual = config.abs_tol * (j as f64).sqrt();
    let inner_tol = config.inner_tol * n.max(1.0);

    // The θ-step Hessian is n (diag q − q qᵀ) + ρ AᵀA with q the bin
    // masses. Dropping the rank-one term leaves a band matrix that makes a
    // good preconditioner; AᵀA couples bins at most `order + 1` apart.
    let band = problem.order + 1;
    let gram = gram_band(&map, j, band);

    let mut residuals = Vec::new();
    let mut inner_iterations = 0;
    let mut converged = false;
    let mut full = theta.clone();
    for iter in 1..=config.max_iters {
        // θ-step on the free coordinates θ_1..θ_{J-1}.
        let target: Vec<f64> = alpha.iter().zip(&u).map(|(a, b)| a + b).collect();
        let mut free = theta[1..].to_vec();
        let log_z = log_partition(&theta, width);
        let mut rows: Vec<Vec<f64>> = gram.iter().map(|r| r.iter().map(|v| rho * v).collect()).collect();
        for (i, row) in rows.iter_mut().enumerate() {
            let q = (theta[i + 1] - log_z).exp() * width;
            row[band] += n * q + 1e-12 * (rho + n);
        }
        let chol = BandCholesky::factor(band, rows);
        let precondition = |d: &mut [f64]| {
            if let Some(c) = &chol {
                c.solve(d)
            }
        };
        let inner = lbfgs::minimize(
            |x, g| {
                full[0] = 0.0;
                full[1..].copy_from_slice(x);
                let log_z = log_partition(&full, width);
                let gap: Vec<f64> = map.split(&full).iter().zip(&target).map(|(a, b)| b - a).collect();
                let back = map.split_transpose(&gap);
                for i in 1..j {
                    let p = (full[i] - log_z).exp() * width;
                    g[i - 1] = -counts[i] + n * p - rho * back[i];
                }
                let fit: f64 = counts.iter().zip(&full).map(|(c, t)| c * t).sum();
                -fit + n * log_z + 0.5 * rho * norm(&gap).powi(2)
            },
            &mut free,
            inner_tol,
            config.inner_max_iters,
            config.lbfgs_memory,
            chol.is_some().then_some((&precondition as &dyn Fn(&mut [f64]), config.inner_tol)),
        );
        inner_iterations += inner.iterations;
        if !inner.converged {
            log::debug!("theta-step stopped short of its tolerance at ADMM iteration {iter}");
        }
        theta[1..].copy_from_slice(&free);

        let a_theta = map.split(&theta);
        let v: Vec<f64> = a_theta.iter().zip(&u).map(|(a, b)| a - b).collect();
        let next = match problem.variant {
            TfVariant::Standard => fused_lasso_prox(&v, t),
            TfVariant::ParametricPenalized => v.iter().map(|&x| soft_threshold(x, t)).collect(),
        };
        let r: Vec<f64> = next.iter().zip(&a_theta).map(|(a, b)| a - b).collect();
        u.iter_mut().zip(&r).for_each(|(ui, ri)| *ui += ri);
        let change: Vec<f64> = next.iter().zip(&alpha).map(|(a, b)| a - b).collect();
        let dual = rho * norm(&map.split_transpose(&change));
        let primal = norm(&r);
        alpha = next;
        residuals.push(super::AdmmResidual { iter, primal, dual });
        if primal <= eps_pri && dual <= eps_dual {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "ADMM hit {} iterations at lambda {} (order {})",
            config.max_iters,
            problem.lambda,
            problem.order
        );
    }
    let log_z = log_partition(&theta, width);
    Ok(TfFit {
        problem: problem.clone(),
        iterations: residuals.len(),
        inner_iterations,
        theta,
        alpha,
        log_z,
        converged,
        eps_pri,
        eps_dual,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn band_cholesky_matches_a_dense_solve() {
        let (dim, b) = (9, 2);
        let dense = DMatrix::from_fn(dim, dim, |i, j| match i.abs_diff(j) {
            0 => 6.0 + i as f64,
            1 => -1.5,
            2 => 0.5,
            _ => 0.0,
        });
        let rows = (0..dim)
            .map(|i| (0..=b).map(|c| if i + c >= b { dense[(i, i + c - b)] } else { 0.0 }).collect())
            .collect();
        let chol = BandCholesky::factor(b, rows).unwrap();
        let rhs: Vec<f64> = (0..dim).map(|i| (i as f64).sin()).collect();
        let mut x = rhs.clone();
        chol.solve(&mut x);
        let expected = dense.lu().solve(&DVector::from_vec(rhs)).unwrap();
        for i in 0..dim {
            assert!((x[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_band_matches_the_operator() {
        for variant in [TfVariant::Standard, TfVariant::ParametricPenalized] {
            for order in 0..3 {
                let j = 8;
                let map = super::super::PenaltyMap::new(variant, order);
                let band = gram_band(&map, j, order + 1);
                let v: Vec<f64> = (0..j).map(|i| if i == 0 { 0.0 } else { (i as f64).cos() }).collect();
                let exact = map.split_transpose(&map.split(&v));
                for row in 1..j {
                    let mut total = 0.0;
                    for col in 1..j {
                        if row.abs_diff(col) <= order + 1 {
                            let (hi, lo) = (row.max(col), row.min(col));
                            total += band[hi - 1][order + 1 + lo - hi] * v[col];
                        }
                    }
                    assert!((total - exact[row]).abs() < 1e-12, "{variant:?} k={order} row {row}");
                }
            }
        }
    }
}
