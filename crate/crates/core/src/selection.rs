//! Cross-validated choice of the penalty and basis order, and undersmoothing.
//!
//! The search is an exhaustive grid over `(order, λ)`. For each order the
//! basis is built once from the full sample, so folds differ only through
//! their sufficient statistics and all fits share one quadrature grid. Each
//! fold walks the λ grid from the largest value down, warm-starting every fit
//! from the previous solution.

use std::io::Write;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{thin_knots, BasisSpec};
use crate::error::{invalid, Error, Result};
use crate::model::{DataSummary, FittedDensity, LogSplineModel, QuadratureGrid};
use crate::solvers::{self, SolverConfig};

/// `count` log-spaced values from `hi` down to `lo`.
pub fn log_grid(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Thirty log-spaced penalties from `1e6` down to `1e-3`.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e6, 1e-3, 30)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub folds: usize,
    /// Penalties, sorted in descending order.
    pub lambda_grid: Vec<f64>,
    pub orders: Vec<usize>,
    pub seed: u64,
    /// Multiplier on the selected `‖β‖₁`; 1 disables undersmoothing.
    pub undersmooth_factor: f64,
    /// Cap on the number of knots, thinned by quantile; `None` keeps all.
    pub max_knots: Option<usize>,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            folds: 5,
            lambda_grid: default_lambda_grid(),
            orders: vec![0, 1, 2],
            seed: 42,
            undersmooth_factor: 1.0,
            max_knots: None,
        }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(invalid("at least two folds are required"));
        }
        if self.lambda_grid.is_empty() {
            return Err(invalid("the lambda grid is empty"));
        }
        if self.lambda_grid.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("the lambda grid must be sorted in descending order"));
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(invalid("lambda values must be finite and non-negative"));
        }
        if self.orders.is_empty() || self.orders.iter().any(|&k| k > 2) {
            return Err(invalid("orders must be a nonempty subset of {0, 1, 2}"));
        }
        if !(self.undersmooth_factor >= 1.0) {
            return Err(invalid("undersmoothing factor must be at least 1"));
        }
        Ok(())
    }

    /// The basis of the given order for this sample, after optional thinning.
    pub fn basis(&self, order: usize, data: &[f64]) -> Result<BasisSpec> {
        let spec = BasisSpec::data_adaptive(order, data)?;
        match self.max_knots {
            Some(m) if spec.knots().len() > m => spec.with_knots(thin_knots(spec.knots(), m)),
            _ => Ok(spec),
        }
    }
}

/// Fold index for every observation: a seeded shuffle dealt round-robin, so
/// fold sizes differ by at most one.
pub fn make_folds(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(invalid("at least two folds are required"));
    }
    if n < folds {
        return Err(invalid(format!("{n} observations cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % folds;
    }
    Ok(assignment)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub order: usize,
    pub lambda: f64,
    pub fold: usize,
    /// Summed held-out negative log-likelihood; `+∞` when the fit failed.
    pub holdout_nll: f64,
}

/// Held-out loss summed over folds for one `(order, λ)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub order: usize,
    pub lambda: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_lambda: f64,
    pub best_order: usize,
    pub records: Vec<CvRecord>,
    pub cells: Vec<CvCell>,
}

impl CvResult {
    /// CSV `order,lambda,fold,holdout_nll` with one summary row per cell
    /// whose fold column reads `total`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["order", "lambda", "fold", "holdout_nll"])?;
        for r in &self.records {
            w.write_record([r.order.to_string(), r.lambda.to_string(), r.fold.to_string(), r.holdout_nll.to_string()])?;
        }
        for c in &self.cells {
            w.write_record([c.order.to_string(), c.lambda.to_string(), "total".into(), c.loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `{"best_lambda": .., "best_order": ..}`.
    pub fn selection_json(&self) -> String {
        serde_json::json!({ "best_lambda": self.best_lambda, "best_order": self.best_order }).to_string()
    }
}

/// Held-out summed NLL `-βᵀ s_val + n_val log C(β)`.
fn holdout_nll(fit: &FittedDensity, validation: &DataSummary) -> f64 {
    -fit.beta().dot(&validation.sum_phi) + validation.n as f64 * fit.log_c()
}

/// Walks the λ grid on one training fold.
fn fold_path(
    model: &LogSplineModel,
    train: &DataSummary,
    validation: &DataSummary,
    lambdas: &[f64],
    config: &SolverConfig,
) -> Vec<f64> {
    let mut warm: Option<DVector<f64>> = None;
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = config.with_lambda(lambda).with_warm_start(warm.take());
            match solvers::fit(model, train, &cfg) {
                Ok(fit) => {
                    let loss = holdout_nll(&fit, validation);
                    warm = Some(fit.beta().clone());
                    if loss.is_finite() {
                        loss
                    } else {
                        f64::INFINITY
                    }
                }
                Err(e) => {
                    log::debug!("cv fit at lambda {lambda} failed: {e}");
                    f64::INFINITY
                }
            }
        })
        .collect()
}

/// K-fold cross-validation over `plan.orders × plan.lambda_grid`.
///
/// Ties in the summed held-out loss go to the larger λ, then the smaller
/// order. Failed fits score `+∞`; if every cell fails the call errors.
pub fn cross_validate(data: &[f64], plan: &CvPlan, config: &SolverConfig) -> Result<CvResult> {
    plan.validate()?;
    let folds = make_folds(data.len(), plan.folds, plan.seed)?;
    let grid = QuadratureGrid::for_sample_size(data.len());

    let mut records = Vec::new();
    for &order in &plan.orders {
        let spec = plan.basis(order, data)?;
        let model = LogSplineModel::new(spec.clone(), grid.clone());
        let full = DataSummary::new(&spec, data)?;
        let per_fold: Vec<Vec<f64>> = (0..plan.folds)
            .into_par_iter()
            .map(|f| -> Result<Vec<f64>> {
                let held: Vec<f64> = data.iter().zip(&folds).filter(|(_, &g)| g == f).map(|(x, _)| *x).collect();
                let validation = DataSummary::new(&spec, &held)?;
                let train = full.minus(&validation);
                Ok(fold_path(&model, &train, &validation, &plan.lambda_grid, config))
            })
            .collect::<Result<_>>()?;
        for (fold, losses) in per_fold.into_iter().enumerate() {
            for (&lambda, loss) in plan.lambda_grid.iter().zip(losses) {
                records.push(CvRecord {
                    order,
                    lambda,
                    fold,
                    holdout_nll: loss,
                });
            }
        }
    }

    summarize(records, &plan.orders, &plan.lambda_grid)
}

/// Sums fold records into cells and picks the winner: lowest loss, then the
/// larger λ, then the smaller order.
pub(crate) fn summarize(records: Vec<CvRecord>, orders: &[usize], lambdas: &[f64]) -> Result<CvResult> {
    let mut cells = Vec::new();
    for &order in orders {
        for &lambda in lambdas {
            let loss = records
                .iter()
                .filter(|r| r.order == order && r.lambda == lambda)
                .map(|r| r.holdout_nll)
                .sum();
            cells.push(CvCell { order, lambda, loss });
        }
    }
    let best = cells
        .iter()
        .filter(|c| c.loss.is_finite())
        .min_by(|a, b| {
            a.loss
                .total_cmp(&b.loss)
                .then(b.lambda.total_cmp(&a.lambda))
                .then(a.order.cmp(&b.order))
        })
        .ok_or(Error::AllCellsFailed)?;
    Ok(CvResult {
        best_lambda: best.lambda,
        best_order: best.order,
        records,
        cells,
    })
}

/// Cross-validates, refits on the full sample at the selected cell and
/// applies the plan's undersmoothing factor.
pub fn fit_cv(data: &[f64], plan: &CvPlan, config: &SolverConfig) -> Result<(CvResult, FittedDensity)> {
    let cv = cross_validate(data, plan, config)?;
    let spec = plan.basis(cv.best_order, data)?;
    let model = LogSplineModel::new(spec.clone(), QuadratureGrid::for_sample_size(data.len()));
    let summary = DataSummary::new(&spec, data)?;
    let fit = solvers::fit(&model, &summary, &config.with_lambda(cv.best_lambda))?;
    let fit = undersmooth(&fit, &summary, plan.undersmooth_factor, config)?;
    Ok((cv, fit))
}

/// Refits with the L1 budget enlarged to `factor · ‖β‖₁`. A factor of one
/// returns the fit unchanged.
pub fn undersmooth(
    fit: &FittedDensity,
    data: &DataSummary,
    factor: f64,
    config: &SolverConfig,
) -> Result<FittedDensity> {
    if !(factor >= 1.0) {
        return Err(invalid("undersmoothing factor must be at least 1"));
    }
    if factor == 1.0 {
        return Ok(fit.clone());
    }
    let model = fit.model();
    let target = fit.l1_norm() * factor;
    let start = config.with_warm_start(Some(fit.beta().clone()));
    let refit = solvers::fit_l1_bound(&model, data, target, &start)?;
    let before = fit.active_set().len();
    let after = refit.active_set().len();
    if after < before {
        log::warn!("undersmoothing by {factor} shrank the active set from {before} to {after}");
    }
    Ok(refit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::Algorithm;
    use rand::Rng;

    fn uniform_sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random()).collect()
    }

    fn bump_sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (rng.random::<f64>() + rng.random::<f64>()) / 2.0).collect()
    }

    fn quick_plan() -> CvPlan {
        CvPlan {
            lambda_grid: log_grid(1e4, 1e-2, 10),
            max_knots: Some(15),
            ..CvPlan::default()
        }
    }

    #[test]
    fn default_grid_spans_range() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 30);
        assert!((g[0] - 1e6).abs() < 1e-6);
        assert!((g[29] - 1e-3).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn folds_are_balanced_and_deterministic() {
        let a = make_folds(10, 5, 42).unwrap();
        assert_eq!(a, make_folds(10, 5, 42).unwrap());
        for f in 0..5 {
            assert_eq!(a.iter().filter(|&&g| g == f).count(), 2);
        }
        let b = make_folds(11, 5, 42).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|f| b.iter().filter(|&&g| g == f).count()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert!(make_folds(4, 5, 1).is_err());
    }

    #[test]
    fn seeds_give_distinct_partitions() {
        let parts: Vec<Vec<usize>> = (0..100).map(|s| make_folds(50, 5, s).unwrap()).collect();
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                assert_ne!(parts[i], parts[j]);
            }
        }
    }

    #[test]
    fn plan_validation() {
        let mut plan = CvPlan::default();
        plan.lambda_grid = vec![1.0, 2.0];
        assert!(plan.validate().is_err());
        plan.lambda_grid = vec![];
        assert!(plan.validate().is_err());
        plan = CvPlan { folds: 1, ..CvPlan::default() };
        assert!(plan.validate().is_err());
        plan = CvPlan { orders: vec![3], ..CvPlan::default() };
        assert!(plan.validate().is_err());
    }

    #[test]
    fn uniform_data_mostly_selects_the_null_fit() {
        let plan = CvPlan { orders: vec![0], ..quick_plan() };
        let cfg = SolverConfig::default();
        let trials = 12;
        let mut null_picks = 0;
        for seed in 0..trials {
            let data = uniform_sample(200, seed);
            let cv = cross_validate(&data, &plan, &cfg).unwrap();
            let spec = plan.basis(0, &data).unwrap();
            let model = LogSplineModel::new(spec.clone(), QuadratureGrid::for_sample_size(200));
            let summary = DataSummary::new(&spec, &data).unwrap();
            if cv.best_lambda >= solvers::lambda_max(&model, &summary, true).unwrap() {
                null_picks += 1;
            }
        }
        assert!(2 * null_picks >= trials, "{null_picks} of {trials}");
    }

    #[test]
    fn single_cell_grid_is_returned() {
        let data = bump_sample(60, 4);
        let plan = CvPlan {
            lambda_grid: vec![3.0],
            orders: vec![1],
            ..quick_plan()
        };
        let cv = cross_validate(&data, &plan, &SolverConfig::default()).unwrap();
        assert_eq!((cv.best_lambda, cv.best_order), (3.0, 1));
    }

    #[test]
    fn loss_table_shape_and_determinism() {
        let data = bump_sample(80, 5);
        let plan = quick_plan();
        let a = cross_validate(&data, &plan, &SolverConfig::default()).unwrap();
        assert_eq!(a.records.len(), plan.folds * plan.lambda_grid.len() * plan.orders.len());
        assert_eq!(a.cells.len(), plan.lambda_grid.len() * plan.orders.len());
        let b = cross_validate(&data, &plan, &SolverConfig::default()).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("order,lambda,fold,holdout_nll\n"));
        assert_eq!(text.lines().count(), 1 + a.records.len() + a.cells.len());
    }

    #[test]
    fn bump_prefers_moderate_penalty() {
        let data = bump_sample(300, 6);
        let (cv, fit) = fit_cv(&data, &quick_plan(), &SolverConfig::default()).unwrap();
        assert!(cv.best_lambda < 1e4);
        assert!(!fit.active_set().is_empty());
        assert!(fit.density_at(0.5).unwrap() > fit.density_at(0.05).unwrap());
    }

    #[test]
    fn undersmoothing_hits_the_budget() {
        let data = bump_sample(200, 8);
        let plan = CvPlan { orders: vec![1], ..quick_plan() };
        let cfg = SolverConfig::default();
        let (_, fit) = fit_cv(&data, &plan, &cfg).unwrap();
        let summary = DataSummary::new(fit.spec(), &data).unwrap();
        let same = undersmooth(&fit, &summary, 1.0, &cfg).unwrap();
        let obj = |f: &FittedDensity| {
            solvers::penalized_objective(&fit.model(), &summary, &cfg.with_lambda(fit.penalty().lambda()), f.beta()).unwrap()
        };
        assert!((obj(&same) - obj(&fit)).abs() <= 1e-8 * obj(&fit).abs());
        let wider = undersmooth(&fit, &summary, 1.5, &cfg).unwrap();
        let target = 1.5 * fit.l1_norm();
        assert!((wider.l1_norm() - target).abs() <= 0.01 * target);
        let mut last = fit.active_set().len();
        for factor in [1.25, 1.5, 2.0] {
            let size = undersmooth(&fit, &summary, factor, &cfg).unwrap().active_set().len();
            if size < last {
                eprintln!("active set shrank at factor {factor}: {last} -> {size}");
            }
            last = size;
        }
        assert!(undersmooth(&fit, &summary, 0.5, &cfg).is_err());
    }

    #[test]
    fn warm_path_matches_cold_fits() {
        let data = bump_sample(100, 9);
        let plan = quick_plan();
        let spec = plan.basis(2, &data).unwrap();
        let model = LogSplineModel::new(spec.clone(), QuadratureGrid::for_sample_size(100));
        let summary = DataSummary::new(&spec, &data).unwrap();
        let cfg = SolverConfig::new(Algorithm::ProxNewton, 0.0);
        let mut warm = None;
        for &lambda in &plan.lambda_grid {
            let c = cfg.with_lambda(lambda);
            let w = solvers::fit(&model, &summary, &c.with_warm_start(warm.take())).unwrap();
            let cold = solvers::fit(&model, &summary, &c).unwrap();
            let (a, b) = (
                solvers::penalized_objective(&model, &summary, &c, w.beta()).unwrap(),
                solvers::penalized_objective(&model, &summary, &c, cold.beta()).unwrap(),
            );
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "lambda {lambda}: {a} vs {b}");
            warm = Some(w.beta().clone());
        }
    }
}
