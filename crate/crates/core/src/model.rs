//! Log-spline density `p_β(x) = exp(f_β(x)) / C(β)` and its likelihood.
//!
//! All integrals over `[0, 1]` use a midpoint rule on a [`QuadratureGrid`].
//! The normalizer is always formed through log-sum-exp so large coefficient
//! vectors do not overflow.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{check_support, BasisSpec};
use crate::error::{invalid, Error, Result};
use crate::solvers::SolverTrace;

/// Midpoint quadrature on a partition of `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    edges: Vec<f64>,
    midpoints: Vec<f64>,
    widths: Vec<f64>,
}

impl QuadratureGrid {
    /// `size` equal bins.
    pub fn uniform(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(invalid("quadrature grid needs at least one bin"));
        }
        let edges = (0..=size).map(|g| g as f64 / size as f64).collect();
        Self::from_edges(edges)
    }

    /// Default bin count for a sample of size `n`: `max(1000, 2n)`.
    pub fn default_size(n: usize) -> usize {
        (2 * n).max(1000)
    }

    pub fn for_sample_size(n: usize) -> Self {
        Self::uniform(Self::default_size(n)).expect("positive size")
    }

    /// Partition with the given edges, which must run from 0 to 1.
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges[0] != 0.0 || *edges.last().unwrap() != 1.0 {
            return Err(invalid("grid edges must start at 0 and end at 1"));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("grid edges must be strictly increasing"));
        }
        let midpoints = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let widths = edges.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self {
            edges,
            midpoints,
            widths,
        })
    }

    pub fn len(&self) -> usize {
        self.midpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.midpoints.is_empty()
    }

    pub fn midpoints(&self) -> &[f64] {
        &self.midpoints
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// True when all bins have equal width (so the grid is described by its
    /// size alone).
    pub fn is_uniform(&self) -> bool {
        let g = self.len() as f64;
        self.edges
            .iter()
            .enumerate()
            .all(|(i, &e)| (e - i as f64 / g).abs() <= 1e-15)
    }

    /// Fraction of bin `g` lying strictly below `x`.
    pub fn fraction_below(&self, g: usize, x: f64) -> f64 {
        let (lo, hi) = (self.edges[g], self.edges[g + 1]);
        if x <= lo {
            0.0
        } else if x >= hi {
            1.0
        } else {
            (x - lo) / (hi - lo)
        }
    }

    /// Index of the bin containing `x` (the last bin is closed on the right).
    pub fn bin_of(&self, x: f64) -> usize {
        let idx = self.edges.partition_point(|&e| e <= x);
        idx.saturating_sub(1).min(self.len() - 1)
    }
}

/// How the negative log-likelihood is aggregated over observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Sufficient statistics of a sample for the log-spline likelihood:
/// the sample size and `Σ_i φ(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSummary {
    pub n: usize,
    pub sum_phi: DVector<f64>,
}

impl DataSummary {
    pub fn new(spec: &BasisSpec, data: &[f64]) -> Result<Self> {
        let mut sum_phi = DVector::zeros(spec.dim());
        let mut row = vec![0.0; spec.dim()];
        for &x in data {
            check_support(x)?;
            spec.eval_into(x, &mut row);
            for (s, &v) in sum_phi.iter_mut().zip(&row) {
                *s += v;
            }
        }
        Ok(Self {
            n: data.len(),
            sum_phi,
        })
    }

    /// Statistics of the complement `self \ other` (used for CV folds).
    pub fn minus(&self, other: &DataSummary) -> DataSummary {
        DataSummary {
            n: self.n - other.n,
            sum_phi: &self.sum_phi - &other.sum_phi,
        }
    }
}

/// Quantities derived from the coefficient vector on the quadrature grid.
#[derive(Debug, Clone)]
pub struct GridEval {
    /// `log C(β)`.
    pub log_c: f64,
    /// Quadrature masses `p_β(m_g) · w_g`; they sum to one.
    pub masses: DVector<f64>,
}

/// A basis together with its quadrature grid and the basis evaluated at
/// every grid midpoint.
#[derive(Debug, Clone)]
pub struct LogSplineModel {
    spec: BasisSpec,
    grid: QuadratureGrid,
    grid_design: DMatrix<f64>,
    log_widths: DVector<f64>,
}

impl LogSplineModel {
    pub fn new(spec: BasisSpec, grid: QuadratureGrid) -> Self {
        let grid_design = spec.design_unchecked(grid.midpoints());
        let log_widths = DVector::from_iterator(grid.len(), grid.widths().iter().map(|w| w.ln()));
        Self {
            spec,
            grid,
            grid_design,
            log_widths,
        }
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Basis evaluated at the grid midpoints (`G × K`).
    pub fn grid_design(&self) -> &DMatrix<f64> {
        &self.grid_design
    }

    /// `f_β` at every grid midpoint.
    pub fn grid_log_density(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.grid_design * beta
    }

    /// Normalize a log-density tabulated on the grid.
    pub fn normalize(&self, eta: &DVector<f64>) -> Result<GridEval> {
        normalize_on_grid(eta, &self.log_widths)
    }

    pub fn eval(&self, beta: &DVector<f64>) -> Result<GridEval> {
        self.normalize(&self.grid_log_density(beta))
    }

    /// `log C(β)`.
    pub fn log_normalizer(&self, beta: &DVector<f64>) -> Result<f64> {
        Ok(self.eval(beta)?.log_c)
    }

    /// `E_β[φ]` under quadrature.
    pub fn expected_basis(&self, masses: &DVector<f64>) -> DVector<f64> {
        self.grid_design.tr_mul(masses)
    }

    /// Covariance of the basis functions under the quadrature masses.
    pub fn basis_covariance(&self, masses: &DVector<f64>) -> DMatrix<f64> {
        let mean = self.expected_basis(masses);
        let mut weighted = self.grid_design.clone();
        for (g, &m) in masses.iter().enumerate() {
            let s = m.max(0.0).sqrt();
            weighted.row_mut(g).scale_mut(s);
        }
        let mut cov = weighted.tr_mul(&weighted);
        cov.ger(-1.0, &mean, &mean, 1.0);
        cov
    }
}

pub(crate) fn normalize_on_grid(eta: &DVector<f64>, log_widths: &DVector<f64>) -> Result<GridEval> {
    let mut max = f64::NEG_INFINITY;
    for (&e, &lw) in eta.iter().zip(log_widths.iter()) {
        if !e.is_finite() {
            return Err(Error::DivergedCoefficients);
        }
        max = max.max(e + lw);
    }
    let mut masses = DVector::zeros(eta.len());
    let mut total = 0.0;
    for (g, (&e, &lw)) in eta.iter().zip(log_widths.iter()).enumerate() {
        let v = (e + lw - max).exp();
        masses[g] = v;
        total += v;
    }
    masses /= total;
    let log_c = max + total.ln();
    if !log_c.is_finite() {
        return Err(Error::DivergedCoefficients);
    }
    Ok(GridEval { log_c, masses })
}

/// `C(β) = ∫ exp(f_β)` by midpoint quadrature.
pub fn normalizing_constant(model: &LogSplineModel, beta: &DVector<f64>) -> Result<f64> {
    Ok(model.log_normalizer(beta)?.exp())
}

/// `-Σ_i f_β(x_i) + n log C(β)` (or its per-observation mean).
pub fn neg_log_likelihood(
    model: &LogSplineModel,
    beta: &DVector<f64>,
    data: &DataSummary,
    reduction: Reduction,
) -> Result<f64> {
    let log_c = model.log_normalizer(beta)?;
    let total = -data.sum_phi.dot(beta) + data.n as f64 * log_c;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / data.n.max(1) as f64,
    })
}

/// Score `Σ_i φ(x_i) - n E_β[φ]`, the negative gradient of the summed
/// negative log-likelihood.
pub fn score_vector(model: &LogSplineModel, beta: &DVector<f64>, data: &DataSummary) -> Result<DVector<f64>> {
    let eval = model.eval(beta)?;
    let expected = model.expected_basis(&eval.masses);
    Ok(&data.sum_phi - expected * data.n as f64)
}

/// Model information `E_β[φφᵀ] - E_β[φ]E_β[φ]ᵀ`.
pub fn information_matrix(model: &LogSplineModel, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let eval = model.eval(beta)?;
    Ok(model.basis_covariance(&eval.masses))
}

/// Empirical information `(1/n) Σ_i S(x_i) S(x_i)ᵀ` with per-observation
/// scores `S(x) = φ(x) - E_β[φ]`.
pub fn empirical_information(model: &LogSplineModel, beta: &DVector<f64>, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() < 2 {
        return Err(invalid("empirical information needs at least two observations"));
    }
    let eval = model.eval(beta)?;
    let mean = model.expected_basis(&eval.masses);
    let scores = centered_scores(model.spec(), data, &mean, None)?;
    Ok(scores.tr_mul(&scores) / data.len() as f64)
}

/// Matrix whose rows are `φ_A(x_i) - E[φ_A]` for the selected columns `A`
/// (all columns when `columns` is `None`).
pub(crate) fn centered_scores(
    spec: &BasisSpec,
    data: &[f64],
    mean: &DVector<f64>,
    columns: Option<&[usize]>,
) -> Result<DMatrix<f64>> {
    let all: Vec<usize>;
    let cols = match columns {
        Some(c) => c,
        None => {
            all = (0..spec.dim()).collect();
            &all
        }
    };
    let mut out = DMatrix::zeros(data.len(), cols.len());
    let mut row = vec![0.0; spec.dim()];
    for (i, &x) in data.iter().enumerate() {
        check_support(x)?;
        spec.eval_into(x, &mut row);
        for (c, &j) in cols.iter().enumerate() {
            out[(i, c)] = row[j] - mean[j];
        }
    }
    Ok(out)
}

/// Penalty used to produce a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    /// Lagrangian weight on `‖β‖₁`.
    Lambda { value: f64 },
    /// L1 budget `M`, reached through the Lagrangian weight `lambda`.
    Bound { value: f64, lambda: f64 },
}

impl Penalty {
    pub fn lambda(&self) -> f64 {
        match *self {
            Penalty::Lambda { value } => value,
            Penalty::Bound { lambda, .. } => lambda,
        }
    }
}

/// An estimated log-spline density. Immutable once built.
#[derive(Debug, Clone)]
pub struct FittedDensity {
    spec: BasisSpec,
    beta: DVector<f64>,
    grid: QuadratureGrid,
    log_c: f64,
    penalty: Penalty,
    trace: SolverTrace,
    converged: bool,
}

impl FittedDensity {
    pub fn new(
        model: &LogSplineModel,
        beta: DVector<f64>,
        penalty: Penalty,
        trace: SolverTrace,
        converged: bool,
    ) -> Result<Self> {
        let log_c = model.log_normalizer(&beta)?;
        Ok(Self {
            spec: model.spec().clone(),
            beta,
            grid: model.grid().clone(),
            log_c,
            penalty,
            trace,
            converged,
        })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    pub fn log_c(&self) -> f64 {
        self.log_c
    }

    pub fn penalty(&self) -> Penalty {
        self.penalty
    }

    pub fn trace(&self) -> &SolverTrace {
        &self.trace
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn l1_norm(&self) -> f64 {
        self.beta.iter().map(|b| b.abs()).sum()
    }

    /// Indices of coefficients with `|β_j| > 1e-8`.
    pub fn active_set(&self) -> Vec<usize> {
        crate::solvers::active_indices(&self.beta)
    }

    /// Rebuild the model (basis + grid) this fit lives on.
    pub fn model(&self) -> LogSplineModel {
        LogSplineModel::new(self.spec.clone(), self.grid.clone())
    }

    /// `f_β(x)`, unnormalized.
    pub fn log_density_unnormalized(&self, x: f64) -> Result<f64> {
        check_support(x)?;
        Ok(self.spec.linear_predictor(self.beta.as_slice(), x))
    }

    /// `exp(f_β(x) - log C)`.
    pub fn density_at(&self, x: f64) -> Result<f64> {
        Ok((self.log_density_unnormalized(x)? - self.log_c).exp())
    }

    pub fn densities(&self, xs: &[f64]) -> Result<Vec<f64>> {
        xs.iter().map(|&x| self.density_at(x)).collect()
    }

    /// Quadrature masses `p(m_g) w_g` on the fit's own grid.
    pub fn grid_masses(&self) -> DVector<f64> {
        let w = self.grid.widths();
        DVector::from_iterator(
            self.grid.len(),
            self.grid.midpoints().iter().zip(w).map(|(&m, &wg)| {
                (self.spec.linear_predictor(self.beta.as_slice(), m) - self.log_c).exp() * wg
            }),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

/// Serialized form of [`FittedDensity`].
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    order: usize,
    knots: Vec<f64>,
    #[serde(default = "default_true")]
    include_parametric: bool,
    beta: Vec<f64>,
    grid: GridFile,
    #[serde(rename = "logC")]
    log_c: f64,
    penalty: Penalty,
    #[serde(default = "default_true")]
    converged: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridFile {
    #[serde(rename = "G")]
    size: usize,
}

fn default_true() -> bool {
    true
}

impl From<&FittedDensity> for ModelFile {
    fn from(fit: &FittedDensity) -> Self {
        debug_assert!(fit.grid.is_uniform());
        ModelFile {
            order: fit.spec.order(),
            knots: fit.spec.knots().to_vec(),
            include_parametric: fit.spec.include_parametric(),
            beta: fit.beta.iter().copied().collect(),
            grid: GridFile { size: fit.grid.len() },
            log_c: fit.log_c,
            penalty: fit.penalty,
            converged: fit.converged,
        }
    }
}

impl TryFrom<ModelFile> for FittedDensity {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Self> {
        let spec = BasisSpec::new(file.order, file.knots, file.include_parametric)?;
        if file.beta.len() != spec.dim() {
            return Err(invalid(format!(
                "model has {} coefficients but the basis has {} functions",
                file.beta.len(),
                spec.dim()
            )));
        }
        Ok(FittedDensity {
            spec,
            beta: DVector::from_vec(file.beta),
            grid: QuadratureGrid::uniform(file.grid.size)?,
            log_c: file.log_c,
            penalty: file.penalty,
            trace: SolverTrace::default(),
            converged: file.converged,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(order: usize, knots: Vec<f64>, g: usize) -> LogSplineModel {
        LogSplineModel::new(
            BasisSpec::new(order, knots, true).unwrap(),
            QuadratureGrid::uniform(g).unwrap(),
        )
    }

    #[test]
    fn grid_widths_sum_to_one() {
        for g in [1, 7, 1000, 4096] {
            let grid = QuadratureGrid::uniform(g).unwrap();
            let s: f64 = grid.widths().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(grid.midpoints().windows(2).all(|w| w[0] < w[1]));
        }
        assert!(QuadratureGrid::uniform(0).is_err());
    }

    #[test]
    fn bin_lookup_and_fractions() {
        let grid = QuadratureGrid::uniform(4).unwrap();
        assert_eq!(grid.bin_of(0.0), 0);
        assert_eq!(grid.bin_of(0.3), 1);
        assert_eq!(grid.bin_of(1.0), 3);
        assert_abs_diff_eq!(grid.fraction_below(1, 0.3), 0.2, epsilon = 1e-12);
        assert_eq!(grid.fraction_below(0, 0.3), 1.0);
        assert_eq!(grid.fraction_below(2, 0.3), 0.0);
    }

    #[test]
    fn zero_coefficients_give_unit_normalizer() {
        let m = model(1, vec![0.5], 100);
        let beta = DVector::zeros(3);
        assert_abs_diff_eq!(normalizing_constant(&m, &beta).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn linear_log_density_normalizer() {
        let m = model(1, vec![0.5], 1000);
        let beta = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let c = normalizing_constant(&m, &beta).unwrap();
        assert!((c - (std::f64::consts::E - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn constant_log_density_normalizer() {
        let m = model(0, vec![0.5], 50);
        let beta = DVector::from_vec(vec![2.5, 0.0]);
        assert_abs_diff_eq!(normalizing_constant(&m, &beta).unwrap(), 2.5f64.exp(), epsilon = 1e-12);
    }

    #[test]
    fn huge_coefficients_do_not_overflow() {
        let m = model(1, vec![0.5], 100);
        let beta = DVector::from_vec(vec![0.0, 2000.0, 0.0]);
        let log_c = m.log_normalizer(&beta).unwrap();
        assert!(log_c.is_finite() && log_c > 1900.0);
        let bad = DVector::from_vec(vec![0.0, f64::NAN, 0.0]);
        assert!(matches!(m.log_normalizer(&bad), Err(Error::DivergedCoefficients)));
    }

    #[test]
    fn nll_trivial_cases() {
        let m = model(0, vec![0.5], 200);
        let data = [0.1, 0.6, 0.9];
        let stats = DataSummary::new(m.spec(), &data).unwrap();
        let zero = DVector::zeros(2);
        assert_eq!(neg_log_likelihood(&m, &zero, &stats, Reduction::Sum).unwrap(), 0.0);
        let constant = DVector::from_vec(vec![1.7, 0.0]);
        assert_abs_diff_eq!(
            neg_log_likelihood(&m, &constant, &stats, Reduction::Sum).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn step_log_density_matches_closed_form() {
        // f = I{x >= 0.5}: C = 0.5 + 0.5 e exactly (knot on a bin edge).
        let m = model(0, vec![0.5], 10_000);
        let stats = DataSummary::new(m.spec(), &[0.9]).unwrap();
        let beta = DVector::from_vec(vec![0.0, 1.0]);
        let nll = neg_log_likelihood(&m, &beta, &stats, Reduction::Sum).unwrap();
        let expected = -1.0 + (0.5 + 0.5 * std::f64::consts::E).ln();
        assert_abs_diff_eq!(nll, expected, epsilon = 1e-12);
    }

    #[test]
    fn mean_reduction_divides_by_n() {
        let m = model(1, vec![0.3], 100);
        let stats = DataSummary::new(m.spec(), &[0.1, 0.5, 0.7, 0.95]).unwrap();
        let beta = DVector::from_vec(vec![0.0, 0.4, -1.0]);
        let s = neg_log_likelihood(&m, &beta, &stats, Reduction::Sum).unwrap();
        let a = neg_log_likelihood(&m, &beta, &stats, Reduction::Mean).unwrap();
        assert_abs_diff_eq!(s / 4.0, a, epsilon = 1e-15);
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (LogSplineModel, DVector<f64>, Vec<f64>) {
        let order = rng.random_range(0..3usize);
        let nk = rng.random_range(1..6usize);
        let mut knots: Vec<f64> = (0..nk).map(|_| rng.random_range(0.05..0.95)).collect();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let m = model(order, knots, 400);
        let beta = DVector::from_iterator(m.dim(), (0..m.dim()).map(|_| rng.random_range(-2.0..2.0)));
        let data: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        (m, beta, data)
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (m, beta, data) = random_instance(&mut rng);
            let stats = DataSummary::new(m.spec(), &data).unwrap();
            let score = score_vector(&m, &beta, &stats).unwrap();
            for j in 0..m.dim() {
                let h = 1e-5;
                let mut bp = beta.clone();
                bp[j] += h;
                let mut bm = beta.clone();
                bm[j] -= h;
                let fd = (neg_log_likelihood(&m, &bp, &stats, Reduction::Sum).unwrap()
                    - neg_log_likelihood(&m, &bm, &stats, Reduction::Sum).unwrap())
                    / (2.0 * h);
                let err = (fd + score[j]).abs() / score[j].abs().max(1.0);
                assert!(err < 1e-5, "component {j}: fd {fd} score {}", score[j]);
            }
        }
    }

    #[test]
    fn constant_basis_has_zero_score_and_variance() {
        let m = model(1, vec![0.4], 300);
        let stats = DataSummary::new(m.spec(), &[0.2, 0.3, 0.8]).unwrap();
        let beta = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let score = score_vector(&m, &beta, &stats).unwrap();
        assert!(score[0].abs() < 1e-12);
        let info = information_matrix(&m, &beta).unwrap();
        assert!(info[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn information_diagonal_is_direct_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, beta, _) = random_instance(&mut rng);
        let info = information_matrix(&m, &beta).unwrap();
        // direct two-pass variance of each column under p_β
        let eta = m.grid_log_density(&beta);
        let mut dens: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let c: f64 = dens.iter().zip(m.grid().widths()).map(|(d, w)| d * w).sum();
        dens.iter_mut().for_each(|d| *d /= c);
        let w = m.grid().widths();
        for j in 0..m.dim() {
            let col: Vec<f64> = m.grid().midpoints().iter().map(|&x| m.spec().eval(x).unwrap()[j]).collect();
            let mean: f64 = col.iter().zip(&dens).zip(w).map(|((v, d), w)| v * d * w).sum();
            let var: f64 = col
                .iter()
                .zip(&dens)
                .zip(w)
                .map(|((v, d), w)| (v - mean).powi(2) * d * w)
                .sum();
            assert_abs_diff_eq!(info[(j, j)], var, epsilon = 1e-12);
        }
    }

    #[test]
    fn information_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let (m, beta, _) = random_instance(&mut rng);
            let info = information_matrix(&m, &beta).unwrap();
            let eig = info.symmetric_eigenvalues();
            assert!(eig.min() >= -1e-10);
        }
    }

    #[test]
    fn information_is_jacobian_of_expected_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (m, beta, _) = random_instance(&mut rng);
            let info = information_matrix(&m, &beta).unwrap();
            let h = 1e-5;
            for j in 0..m.dim() {
                let mut bp = beta.clone();
                bp[j] += h;
                let mut bm = beta.clone();
                bm[j] -= h;
                let ep = m.expected_basis(&m.eval(&bp).unwrap().masses);
                let em = m.expected_basis(&m.eval(&bm).unwrap().masses);
                let col = (ep - em) / (2.0 * h);
                for i in 0..m.dim() {
                    let scale = info[(i, j)].abs().max(1e-3);
                    assert!((col[i] - info[(i, j)]).abs() / scale < 1e-4);
                }
            }
        }
    }

    #[test]
    fn empirical_information_needs_two_points() {
        let m = model(1, vec![0.5], 100);
        let beta = DVector::zeros(3);
        assert!(empirical_information(&m, &beta, &[0.3]).is_err());
        let emp = empirical_information(&m, &beta, &[0.3, 0.6]).unwrap();
        assert!(emp.rank(1e-12) <= 2);
    }

    #[test]
    fn density_normalizes_on_own_grid() {
        let m = model(2, vec![0.2, 0.6], 1000);
        let beta = DVector::from_vec(vec![0.0, 1.0, -3.0, 4.0, -2.0]);
        let fit = FittedDensity::new(&m, beta, Penalty::Lambda { value: 0.0 }, SolverTrace::default(), true).unwrap();
        let total: f64 = fit.grid_masses().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
        let riemann: f64 = (0..201)
            .map(|i| fit.density_at(i as f64 / 200.0).unwrap())
            .enumerate()
            .map(|(i, d)| if i == 0 || i == 200 { 0.5 * d } else { d })
            .sum::<f64>()
            / 200.0;
        assert!((riemann - 1.0).abs() < 1e-2);
        assert!(fit.density_at(1.5).is_err());
    }

    #[test]
    fn uniform_fit_density_is_one() {
        let m = model(1, vec![0.5], 100);
        let fit = FittedDensity::new(&m, DVector::zeros(3), Penalty::Lambda { value: 1.0 }, SolverTrace::default(), true)
            .unwrap();
        for x in [0.0, 0.3, 1.0] {
            assert_abs_diff_eq!(fit.density_at(x).unwrap(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn json_round_trip_is_bit_faithful() {
        let m = model(2, vec![0.1 + 0.2, 1.0 / 3.0], 1000);
        let beta = DVector::from_vec(vec![0.0, 0.1 + 0.2, -1.0 / 7.0, 1e-300, std::f64::consts::PI]);
        let fit = FittedDensity::new(&m, beta, Penalty::Lambda { value: 0.3 }, SolverTrace::default(), true).unwrap();
        let back = FittedDensity::from_json(&fit.to_json().unwrap()).unwrap();
        assert_eq!(back.beta(), fit.beta());
        assert_eq!(back.spec(), fit.spec());
        assert_eq!(back.log_c().to_bits(), fit.log_c().to_bits());
        assert_eq!(back.grid(), fit.grid());
        assert_eq!(back.penalty(), fit.penalty());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 64, .. ProptestConfig::default() })]

        #[test]
        fn score_has_mean_zero_under_model(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, beta, _) = random_instance(&mut rng);
            let eval = m.eval(&beta).unwrap();
            let mean = m.expected_basis(&eval.masses);
            // Σ_g S_j(m_g) p w = E[φ_j] - E[φ_j]
            for j in 0..m.dim() {
                let centered: f64 = m.grid_design().column(j).iter().zip(eval.masses.iter())
                    .map(|(v, w)| (v - mean[j]) * w).sum();
                prop_assert!(centered.abs() < 1e-12);
            }
        }

        #[test]
        fn nll_is_convex(seed in 0u64..1000, t in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, b1, data) = random_instance(&mut rng);
            let b2 = DVector::from_iterator(m.dim(), (0..m.dim()).map(|_| rng.random_range(-2.0..2.0)));
            let stats = DataSummary::new(m.spec(), &data).unwrap();
            let l = |b: &DVector<f64>| neg_log_likelihood(&m, b, &stats, Reduction::Sum).unwrap();
            let mix = &b1 * t + &b2 * (1.0 - t);
            prop_assert!(l(&mix) <= t * l(&b1) + (1.0 - t) * l(&b2) + 1e-10);
        }

        #[test]
        fn intercept_shift_leaves_density_unchanged(shift in -20.0f64..20.0, x in 0.0f64..=1.0) {
            let m = model(1, vec![0.4], 200);
            let beta = DVector::from_vec(vec![0.0, 1.5, -2.0]);
            let mut shifted = beta.clone();
            shifted[0] += shift;
            let a = FittedDensity::new(&m, beta, Penalty::Lambda { value: 0.0 }, SolverTrace::default(), true).unwrap();
            let b = FittedDensity::new(&m, shifted, Penalty::Lambda { value: 0.0 }, SolverTrace::default(), true).unwrap();
            prop_assert!((a.density_at(x).unwrap() - b.density_at(x).unwrap()).abs() < 1e-12);
        }
    }
}
