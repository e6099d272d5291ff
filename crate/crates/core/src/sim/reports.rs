use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Replicate;
use crate::dgp::{DgpKind, DgpSpec};
use crate::error::{invalid, Result};
use crate::inference::{linspace, Z_95};
use crate::targeting::EstimandSpec;

/// Least-squares line through `(x, y)` with its coefficient of
/// determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<SlopeFit> {
    let n = x.len() as f64;
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(SlopeFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m == 0 {
        f64::NAN
    } else if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Replicates grouped by `(dgp, n)`, preserving order.
fn cells(replicates: &[Replicate]) -> impl Iterator<Item = &[Replicate]> {
    replicates.chunk_by(|a, b| a.dgp == b.dgp && a.n == b.n)
}

fn csv_writer<W: Write>(out: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformCell {
    pub dgp: DgpKind,
    pub n: usize,
    pub completed: usize,
    pub failed: usize,
    pub median_sup_error: f64,
    /// One entry per completed replicate.
    pub sup_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformConvergenceReport {
    pub cells: Vec<UniformCell>,
    /// Fit of `log median` on `log n` per DGP (absent with one sample size).
    pub slopes: Vec<(DgpKind, Option<SlopeFit>)>,
}

impl UniformConvergenceReport {
    pub fn from_replicates(replicates: &[Replicate]) -> Result<Self> {
        let mut out: Vec<UniformCell> = Vec::new();
        for cell in cells(replicates) {
            let sup_errors: Vec<f64> = cell.iter().filter_map(|r| r.data()).map(|d| d.sup_error).collect();
            out.push(UniformCell {
                dgp: cell[0].dgp,
                n: cell[0].n,
                completed: sup_errors.len(),
                failed: cell.len() - sup_errors.len(),
                median_sup_error: median(&mut sup_errors.clone()),
                sup_errors,
            });
        }
        let mut slopes = Vec::new();
        for group in out.chunk_by(|a, b| a.dgp == b.dgp) {
            let usable: Vec<&UniformCell> = group.iter().filter(|c| c.median_sup_error > 0.0).collect();
            let x: Vec<f64> = usable.iter().map(|c| (c.n as f64).ln()).collect();
            let y: Vec<f64> = usable.iter().map(|c| c.median_sup_error.ln()).collect();
            slopes.push((group[0].dgp, ols_slope(&x, &y)));
        }
        Ok(Self { cells: out, slopes })
    }

    pub fn slope(&self, dgp: DgpKind) -> Option<SlopeFit> {
        self.slopes.iter().find(|(d, _)| *d == dgp).and_then(|(_, s)| *s)
    }

    /// `dgp,n,replicate,sup_error` for every completed replicate.
    pub fn write_errors_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out, &["dgp", "n", "replicate", "sup_error"])?;
        for c in &self.cells {
            for (i, e) in c.sup_errors.iter().enumerate() {
                w.write_record([c.dgp.name().to_string(), c.n.to_string(), i.to_string(), e.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `dgp,n,completed,failed,median_sup_error`.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out, &["dgp", "n", "completed", "failed", "median_sup_error"])?;
        for c in &self.cells {
            w.write_record([
                c.dgp.name().to_string(),
                c.n.to_string(),
                c.completed.to_string(),
                c.failed.to_string(),
                c.median_sup_error.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `dgp,slope,intercept,r_squared`; empty fields when no slope exists.
    pub fn write_slopes_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out, &["dgp", "slope", "intercept", "r_squared"])?;
        for (d, s) in &self.slopes {
            let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                d.name().to_string(),
                f(s.map(|s| s.slope)),
                f(s.map(|s| s.intercept)),
                f(s.map(|s| s.r_squared)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub dgp: DgpKind,
    pub n: usize,
    pub completed: usize,
    pub failed: usize,
    /// Delta-method coverage averaged over replicates and grid points.
    pub estimated_coverage: f64,
    /// Coverage of `p̂ ± 1.96 sd_MC` on the common grid.
    pub oracle_coverage: f64,
    pub mean_ci_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
}

impl CoverageReport {
    /// Estimated coverage uses each replicate's own grid between its first
    /// and last observation. Oracle coverage needs a grid shared by all
    /// replicates, taken over the intersection of their data ranges.
    pub fn from_replicates(replicates: &[Replicate], grid_points: usize) -> Result<Self> {
        let mut rows = Vec::new();
        for cell in cells(replicates) {
            let done: Vec<_> = cell.iter().filter_map(|r| r.data()).collect();
            if done.len() < 2 {
                return Err(invalid("oracle coverage needs at least two completed replicates"));
            }
            let estimated: Vec<f64> = done
                .iter()
                .map(|d| d.coverage.ok_or_else(|| invalid("replicates were run without bands")))
                .collect::<Result<_>>()?;
            let widths: Vec<f64> = done.iter().filter_map(|d| d.mean_ci_width).collect();

            let lo = done.iter().map(|d| d.data_range.0).fold(f64::NEG_INFINITY, f64::max);
            let hi = done.iter().map(|d| d.data_range.1).fold(f64::INFINITY, f64::min);
            let grid = linspace(lo, hi.max(lo), grid_points);
            let truth = DgpSpec::new(cell[0].dgp);
            let fitted: Vec<Vec<f64>> = done.iter().map(|d| d.fit.densities(&grid)).collect::<Result<_>>()?;
            let mut covered = 0usize;
            for (i, &x) in grid.iter().enumerate() {
                let column: Vec<f64> = fitted.iter().map(|f| f[i]).collect();
                let sd = sample_variance(&column).sqrt();
                let p0 = truth.density(x)?;
                covered += column.iter().filter(|&&v| (v - p0).abs() <= Z_95 * sd).count();
            }
            rows.push(CoverageRow {
                dgp: cell[0].dgp,
                n: cell[0].n,
                completed: done.len(),
                failed: cell.len() - done.len(),
                estimated_coverage: mean(&estimated),
                oracle_coverage: covered as f64 / (grid.len() * done.len()) as f64,
                mean_ci_width: mean(&widths),
            });
        }
        Ok(Self { rows })
    }

    pub fn row(&self, dgp: DgpKind, n: usize) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.dgp == dgp && r.n == n)
    }

    /// `dgp,n,completed,failed,estimated_coverage,oracle_coverage,mean_ci_width`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(
            out,
            &["dgp", "n", "completed", "failed", "estimated_coverage", "oracle_coverage", "mean_ci_width"],
        )?;
        for r in &self.rows {
            w.write_record([
                r.dgp.name().to_string(),
                r.n.to_string(),
                r.completed.to_string(),
                r.failed.to_string(),
                r.estimated_coverage.to_string(),
                r.oracle_coverage.to_string(),
                r.mean_ci_width.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The estimand outcomes of one `(dgp, n)` cell: one vector per estimand,
/// one entry per completed replicate.
fn estimand_columns(cell: &[Replicate]) -> Result<Vec<(EstimandSpec, Vec<super::EstimandOutcome>)>> {
    let done: Vec<_> = cell.iter().filter_map(|r| r.data()).collect();
    let Some(first) = done.first() else {
        return Err(invalid("no completed replicates in a cell"));
    };
    if first.estimands.is_empty() {
        return Err(invalid("replicates were run without estimands"));
    }
    Ok(first
        .estimands
        .iter()
        .enumerate()
        .map(|(i, e)| (e.spec, done.iter().map(|d| d.estimands[i]).collect()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub dgp: DgpKind,
    pub n: usize,
    pub estimand: String,
    /// `plugin`, `tmle` or `classical`.
    pub estimator: String,
    pub replicates: usize,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub abs_bias_over_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
}

impl EfficiencyReport {
    pub fn from_replicates(replicates: &[Replicate]) -> Result<Self> {
        let mut rows = Vec::new();
        for cell in cells(replicates) {
            for (spec, outcomes) in estimand_columns(cell)? {
                let truth = outcomes[0].truth;
                let pick: [(&str, fn(&super::EstimandOutcome) -> f64); 3] =
                    [("plugin", |o| o.plugin), ("tmle", |o| o.tmle), ("classical", |o| o.classical)];
                for (name, get) in pick {
                    let values: Vec<f64> = outcomes.iter().map(get).collect();
                    let bias = mean(&values) - truth;
                    let variance = if values.len() > 1 { sample_variance(&values) } else { f64::NAN };
                    let mse = values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / values.len() as f64;
                    rows.push(EfficiencyRow {
                        dgp: cell[0].dgp,
                        n: cell[0].n,
                        estimand: spec.label(),
                        estimator: name.to_string(),
                        replicates: values.len(),
                        bias,
                        variance,
                        mse,
                        abs_bias_over_sd: bias.abs() / variance.sqrt(),
                    });
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn row(&self, dgp: DgpKind, n: usize, estimand: &str, estimator: &str) -> Option<&EfficiencyRow> {
        self.rows
            .iter()
            .find(|r| r.dgp == dgp && r.n == n && r.estimand == estimand && r.estimator == estimator)
    }

    /// `dgp,n,estimand,estimator,replicates,bias,variance,mse,abs_bias_over_sd`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(
            out,
            &["dgp", "n", "estimand", "estimator", "replicates", "bias", "variance", "mse", "abs_bias_over_sd"],
        )?;
        for r in &self.rows {
            w.write_record([
                r.dgp.name().to_string(),
                r.n.to_string(),
                r.estimand.clone(),
                r.estimator.clone(),
                r.replicates.to_string(),
                r.bias.to_string(),
                r.variance.to_string(),
                r.mse.to_string(),
                r.abs_bias_over_sd.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandCoverageRow {
    pub dgp: DgpKind,
    pub n: usize,
    pub estimand: String,
    pub completed: usize,
    /// Share of replicates whose post-targeting influence-curve interval
    /// covers the truth.
    pub eic_coverage: f64,
    /// Coverage of `tmle ± 1.96 sd_MC`.
    pub oracle_coverage: f64,
    pub mean_se: f64,
    pub oracle_sd: f64,
    /// Replicates whose targeting hit the step cap.
    pub unconverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimandCoverageReport {
    pub rows: Vec<EstimandCoverageRow>,
    /// `(dgp, n, replicate index, outcome)` for every completed replicate.
    pub records: Vec<(DgpKind, usize, usize, super::EstimandOutcome)>,
}

impl EstimandCoverageReport {
    pub fn from_replicates(replicates: &[Replicate]) -> Result<Self> {
        let mut rows = Vec::new();
        for cell in cells(replicates) {
            for (spec, outcomes) in estimand_columns(cell)? {
                if outcomes.len() < 2 {
                    return Err(invalid("oracle coverage needs at least two completed replicates"));
                }
                let tmle: Vec<f64> = outcomes.iter().map(|o| o.tmle).collect();
                let sd = sample_variance(&tmle).sqrt();
                let m = outcomes.len() as f64;
                rows.push(EstimandCoverageRow {
                    dgp: cell[0].dgp,
                    n: cell[0].n,
                    estimand: spec.label(),
                    completed: outcomes.len(),
                    eic_coverage: outcomes.iter().filter(|o| o.lo <= o.truth && o.truth <= o.hi).count() as f64 / m,
                    oracle_coverage: outcomes.iter().filter(|o| (o.tmle - o.truth).abs() <= Z_95 * sd).count() as f64
                        / m,
                    mean_se: outcomes.iter().map(|o| o.se).sum::<f64>() / m,
                    oracle_sd: sd,
                    unconverged: outcomes.iter().filter(|o| !o.converged).count(),
                });
            }
        }
        let records = replicates
            .iter()
            .filter_map(|r| r.data().map(|d| (r, d)))
            .flat_map(|(r, d)| d.estimands.iter().map(move |e| (r.dgp, r.n, r.index, *e)))
            .collect();
        Ok(Self { rows, records })
    }

    pub fn row(&self, dgp: DgpKind, n: usize, estimand: &str) -> Option<&EstimandCoverageRow> {
        self.rows
            .iter()
            .find(|r| r.dgp == dgp && r.n == n && r.estimand == estimand)
    }

    /// `dgp,n,estimand,completed,eic_coverage,oracle_coverage,mean_se,oracle_sd,unconverged`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(
            out,
            &[
                "dgp",
                "n",
                "estimand",
                "completed",
                "eic_coverage",
                "oracle_coverage",
                "mean_se",
                "oracle_sd",
                "unconverged",
            ],
        )?;
        for r in &self.rows {
            w.write_record([
                r.dgp.name().to_string(),
                r.n.to_string(),
                r.estimand.clone(),
                r.completed.to_string(),
                r.eic_coverage.to_string(),
                r.oracle_coverage.to_string(),
                r.mean_se.to_string(),
                r.oracle_sd.to_string(),
                r.unconverged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `dgp,n,replicate,estimand,truth,plugin,tmle,classical,se,lo,hi,steps,converged`.
    pub fn write_records_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(
            out,
            &[
                "dgp",
                "n",
                "replicate",
                "estimand",
                "truth",
                "plugin",
                "tmle",
                "classical",
                "se",
                "lo",
                "hi",
                "steps",
                "converged",
            ],
        )?;
        for (d, n, r, o) in &self.records {
            w.write_record([
                d.name().to_string(),
                n.to_string(),
                r.to_string(),
                o.spec.label(),
                o.truth.to_string(),
                o.plugin.to_string(),
                o.tmle.to_string(),
                o.classical.to_string(),
                o.se.to_string(),
                o.lo.to_string(),
                o.hi.to_string(),
                o.steps.to_string(),
                o.converged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
