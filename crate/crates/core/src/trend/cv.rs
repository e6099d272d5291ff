use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{admm_fit, bin_counts, AdmmConfig, TfFit, TfProblem, TfVariant};
use crate::error::{invalid, Error, Result};
use crate::selection::{default_lambda_grid, make_folds, summarize, CvRecord, CvResult};

pub type TfCvRecord = CvRecord;
pub type TfCvResult = CvResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TfCvPlan {
    pub folds: usize,
    /// Penalties in descending order.
    pub lambda_grid: Vec<f64>,
    pub orders: Vec<usize>,
    pub seed: u64,
    /// Bin count; `None` uses `n + 1` for the full sample.
    pub bins: Option<usize>,
    pub variant: TfVariant,
}

impl Default for TfCvPlan {
    fn default() -> Self {
        Self {
            folds: 5,
            lambda_grid: default_lambda_grid(),
            orders: vec![0, 1, 2],
            seed: 42,
            bins: None,
            variant: TfVariant::Standard,
        }
    }
}

impl TfCvPlan {
    fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() || self.lambda_grid.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("the lambda grid must be nonempty and descending"));
        }
        if self.orders.is_empty() || self.orders.iter().any(|&k| k > 2) {
            return Err(invalid("orders must be a nonempty subset of {0, 1, 2}"));
        }
        Ok(())
    }

    fn problem(&self, counts: Vec<f64>, order: usize, lambda: f64) -> Result<TfProblem> {
        let p = TfProblem::from_counts(counts, order, lambda)?;
        Ok(match self.variant {
            TfVariant::Standard => p,
            TfVariant::ParametricPenalized => p.tfpp_variant(),
        })
    }
}

/// K-fold cross-validation of the trend filter over orders and penalties.
/// Every fold shares the bin grid of the full sample, and each fold walks
/// the λ path from the largest value with warm starts.
pub fn cross_validate_tf(data: &[f64], plan: &TfCvPlan, config: &AdmmConfig) -> Result<TfCvResult> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let bins = plan.bins.unwrap_or(data.len() + 1);
    let folds = make_folds(data.len(), plan.folds, plan.seed)?;
    let jobs: Vec<(usize, usize)> = plan
        .orders
        .iter()
        .flat_map(|&k| (0..plan.folds).map(move |f| (k, f)))
        .collect();
    let losses: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(order, fold)| -> Result<Vec<f64>> {
            let (held, train): (Vec<(f64, usize)>, Vec<(f64, usize)>) =
                data.iter().copied().zip(folds.iter().copied()).partition(|(_, g)| *g == fold);
            let held: Vec<f64> = held.into_iter().map(|(x, _)| x).collect();
            let train: Vec<f64> = train.into_iter().map(|(x, _)| x).collect();
            let counts = bin_counts(&train, bins)?;
            let mut warm: Option<Vec<f64>> = None;
            plan.lambda_grid
                .iter()
                .map(|&lambda| {
                    let problem = plan.problem(counts.clone(), order, lambda)?;
                    let cfg = AdmmConfig {
                        warm_start: warm.take(),
                        ..config.clone()
                    };
                    Ok(match admm_fit(&problem, &cfg) {
                        Ok(fit) => {
                            let loss = fit.holdout_nll(&held).unwrap_or(f64::INFINITY);
                            warm = Some(fit.theta);
                            if loss.is_finite() {
                                loss
                            } else {
                                f64::INFINITY
                            }
                        }
                        Err(e) => {
                            log::debug!("trend-filter cv fit at lambda {lambda} failed: {e}");
                            f64::INFINITY
                        }
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    for (&(order, fold), row) in jobs.iter().zip(losses) {
        for (&lambda, holdout_nll) in plan.lambda_grid.iter().zip(row) {
            records.push(CvRecord {
                order,
                lambda,
                fold,
                holdout_nll,
            });
        }
    }
    summarize(records, &plan.orders, &plan.lambda_grid)
}

/// Cross-validates and refits on the full sample at the selected cell.
pub fn fit_tf_cv(data: &[f64], plan: &TfCvPlan, config: &AdmmConfig) -> Result<(TfCvResult, TfFit)> {
    let cv = cross_validate_tf(data, plan, config)?;
    let counts = bin_counts(data, plan.bins.unwrap_or(data.len() + 1))?;
    let fit = admm_fit(&plan.problem(counts, cv.best_order, cv.best_lambda)?, config)?;
    Ok((cv, fit))
}
