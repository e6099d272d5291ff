//! Truncated power basis on `[0, 1]`.
//!
//! For order `k` the basis consists of the global polynomial terms
//! `1, x, ..., x^k` followed by one truncated term `(x - u)_+^k` per knot
//! `u`. Columns are always laid out parametric-first (ascending degree) and
//! then by ascending knot. For `k = 0` the truncated term is the right-closed
//! step `I{u <= x}`.

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

/// Order and knots of a truncated power working model.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    order: usize,
    knots: Vec<f64>,
    include_parametric: bool,
}

impl BasisSpec {
    /// Knots must be strictly increasing and lie in `(0, 1]`.
    pub fn new(order: usize, knots: Vec<f64>, include_parametric: bool) -> Result<Self> {
        for (i, &u) in knots.iter().enumerate() {
            if !(u > 0.0 && u <= 1.0) {
                return Err(invalid(format!("knot {u} is not in (0, 1]")));
            }
            if i > 0 && knots[i - 1] >= u {
                return Err(invalid("knots must be strictly increasing"));
            }
        }
        Ok(Self {
            order,
            knots,
            include_parametric,
        })
    }

    /// Data-adaptive basis: one knot per distinct observation.
    pub fn data_adaptive(order: usize, data: &[f64]) -> Result<Self> {
        Self::new(order, make_data_adaptive_knots(data)?, true)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn include_parametric(&self) -> bool {
        self.include_parametric
    }

    /// Number of polynomial columns (`k + 1`, or 0 when excluded).
    pub fn num_parametric(&self) -> usize {
        if self.include_parametric {
            self.order + 1
        } else {
            0
        }
    }

    /// Total number of basis functions.
    pub fn dim(&self) -> usize {
        self.num_parametric() + self.knots.len()
    }

    /// Column of the constant term, if present.
    pub fn intercept_index(&self) -> Option<usize> {
        self.include_parametric.then_some(0)
    }

    /// Evaluate every basis function at `x`.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        check_support(x)?;
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation into a preallocated row.
    pub(crate) fn eval_into(&self, x: f64, out: &mut [f64]) {
        let k = self.order as i32;
        let p = self.num_parametric();
        let mut pow = 1.0;
        for slot in out.iter_mut().take(p) {
            *slot = pow;
            pow *= x;
        }
        for (slot, &u) in out[p..].iter_mut().zip(&self.knots) {
            *slot = truncated_power(x, u, k);
        }
    }

    /// `f(x) = Σ β_j φ_j(x)` without materializing the row.
    pub(crate) fn linear_predictor(&self, beta: &[f64], x: f64) -> f64 {
        let k = self.order as i32;
        let p = self.num_parametric();
        let mut acc = 0.0;
        let mut pow = 1.0;
        for &b in &beta[..p] {
            acc += b * pow;
            pow *= x;
        }
        for (&b, &u) in beta[p..].iter().zip(&self.knots) {
            if b != 0.0 {
                acc += b * truncated_power(x, u, k);
            }
        }
        acc
    }

    /// Design matrix with one row per point.
    pub fn design(&self, points: &[f64]) -> Result<DesignMatrix> {
        for &x in points {
            check_support(x)?;
        }
        Ok(DesignMatrix(self.design_unchecked(points)))
    }

    pub(crate) fn design_unchecked(&self, points: &[f64]) -> DMatrix<f64> {
        let dim = self.dim();
        let mut m = DMatrix::zeros(points.len(), dim);
        let mut row = vec![0.0; dim];
        for (i, &x) in points.iter().enumerate() {
            self.eval_into(x, &mut row);
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Copy of this spec with a different set of knots.
    pub fn with_knots(&self, knots: Vec<f64>) -> Result<Self> {
        Self::new(self.order, knots, self.include_parametric)
    }
}

#[inline]
fn truncated_power(x: f64, u: f64, k: i32) -> f64 {
    if u <= x {
        if k == 0 {
            1.0
        } else {
            (x - u).powi(k)
        }
    } else {
        0.0
    }
}

pub(crate) fn check_support(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::OutOfSupport(x))
    }
}

/// Basis functions evaluated at a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix(DMatrix<f64>);

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Sorted distinct observations used as knots.
///
/// Observations equal to zero are moved to machine epsilon so the first
/// step column is not collinear with the intercept.
pub fn make_data_adaptive_knots(data: &[f64]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    for &x in data {
        check_support(x)?;
    }
    let mut knots: Vec<f64> = data
        .iter()
        .map(|&x| if x == 0.0 { f64::EPSILON } else { x })
        .collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    Ok(knots)
}

/// Equally spaced knots `j / J` for `j = 1..=J`.
pub fn make_uniform_knots(count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(invalid("uniform knot count must be positive"));
    }
    Ok((1..=count).map(|j| j as f64 / count as f64).collect())
}

/// Keep at most `max` knots, chosen at evenly spaced ranks of the sorted
/// input (empirical quantiles). The first and last knot are always kept.
pub fn thin_knots(knots: &[f64], max: usize) -> Vec<f64> {
    if max == 0 {
        return Vec::new();
    }
    if knots.len() <= max {
        return knots.to_vec();
    }
    if max == 1 {
        return vec![knots[knots.len() / 2]];
    }
    let last = (knots.len() - 1) as f64;
    let mut out: Vec<f64> = (0..max)
        .map(|i| {
            let idx = (i as f64 * last / (max - 1) as f64).round() as usize;
            knots[idx]
        })
        .collect();
    out.dedup();
    out
}
