//! Monte Carlo experiments over the reference DGPs.
//!
//! Replicate `r` of DGP `d` at sample size `n` draws its sample from the
//! substream `derive_seed(master_seed, [d, n, r])` and reuses that seed for
//! its cross-validation folds, so every replicate is a pure function of the
//! plan and its coordinates. Replicates run in parallel and are collected in
//! coordinate order, which makes every output file independent of thread
//! scheduling.
//!
//! The density experiments share one cross-validated fit per replicate:
//! [`run_plan`] simulates once and derives every requested table from the
//! same replicates.

mod bench;
mod reports;


use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{DgpKind, DgpSpec};
use crate::error::{invalid, Error, Result};
use crate::inference::{delta_method_se, linspace, DeltaConfig};
use crate::model::FittedDensity;
use crate::seeds::derive_seed;
use crate::selection::{fit_cv, CvPlan};
use crate::solvers::{Algorithm, SolverConfig};
use crate::targeting::{tmle_target, EstimandSpec, TmleConfig};

pub use bench::{run_solver_bench, ARRIVAL_GAP, BenchPlan, BenchRow, SolverBenchReport};
pub use reports::{
    ols_slope, CoverageReport, CoverageRow, EfficiencyReport, EfficiencyRow, EstimandCoverageReport,
    EstimandCoverageRow, SlopeFit, UniformCell, UniformConvergenceReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    UniformConvergence,
    Coverage,
    Efficiency,
    EstimandCoverage,
    SolverBench,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::UniformConvergence,
        Experiment::Coverage,
        Experiment::Efficiency,
        Experiment::EstimandCoverage,
        Experiment::SolverBench,
    ];
}

/// A Monte Carlo study. Every field has a default, so a plan file only
/// needs the entries it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    /// DGP names (long or short form).
    pub dgps: Vec<String>,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub master_seed: u64,
    pub experiments: Vec<Experiment>,
    pub output_dir: PathBuf,
    /// Tuning grid; its `seed` is replaced by each replicate's seed.
    pub cv: CvPlan,
    pub solver: Algorithm,
    pub delta: DeltaConfig,
    /// Points in the sup-norm and coverage grids.
    pub grid_points: usize,
    /// Estimands such as `mean`, `moment:2`, `survival:0.5`, `median`.
    pub estimands: Vec<String>,
    pub tmle_min_steps: usize,
    pub tmle_max_steps: usize,
    /// Largest tolerated share of failed replicates in any `(dgp, n)` cell.
    pub max_failure_rate: f64,
    pub bench: BenchPlan,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            dgps: DgpKind::ALL.iter().map(|d| d.name().to_string()).collect(),
            sample_sizes: vec![50, 100, 200, 400, 800],
            replicates: 100,
            master_seed: 42,
            experiments: vec![
                Experiment::UniformConvergence,
                Experiment::Coverage,
                Experiment::Efficiency,
                Experiment::EstimandCoverage,
            ],
            output_dir: PathBuf::from("sim_output"),
            cv: CvPlan {
                max_knots: Some(25),
                ..CvPlan::default()
            },
            solver: Algorithm::ProxNewton,
            delta: DeltaConfig::default(),
            grid_points: 201,
            estimands: ["mean", "moment:2", "survival:0.5", "median"].map(String::from).to_vec(),
            tmle_min_steps: 1,
            tmle_max_steps: 10,
            max_failure_rate: 0.05,
            bench: BenchPlan::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(invalid("at least one replicate is required"));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|&n| n < 25) {
            return Err(invalid("sample sizes must be nonempty and at least 25"));
        }
        if self.grid_points < 2 {
            return Err(invalid("grid_points must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(invalid("max_failure_rate must lie in [0, 1]"));
        }
        self.dgp_kinds()?;
        self.estimand_specs()?;
        self.cv.validate()?;
        self.bench.validate()
    }

    pub fn dgp_kinds(&self) -> Result<Vec<DgpKind>> {
        if self.dgps.is_empty() {
            return Err(invalid("the DGP list is empty"));
        }
        self.dgps.iter().map(|s| DgpKind::from_str(s)).collect()
    }

    pub fn estimand_specs(&self) -> Result<Vec<EstimandSpec>> {
        self.estimands.iter().map(|s| s.parse()).collect()
    }

    fn tmle_config(&self) -> TmleConfig {
        TmleConfig {
            min_steps: self.tmle_min_steps,
            max_steps: self.tmle_max_steps,
            ..TmleConfig::default()
        }
    }

    /// Seed of replicate `r` of `dgp` at sample size `n`.
    pub fn replicate_seed(&self, dgp: DgpKind, n: usize, r: usize) -> u64 {
        derive_seed(self.master_seed, &[dgp.index(), n as u64, r as u64])
    }
}

/// One estimand on one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimandOutcome {
    pub spec: EstimandSpec,
    pub truth: f64,
    pub plugin: f64,
    pub tmle: f64,
    pub classical: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Everything computed from one successful replicate.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub fit: FittedDensity,
    pub order: usize,
    pub lambda: f64,
    /// Smallest and largest observation.
    pub data_range: (f64, f64),
    /// `max |p̂ − p₀|` over the evenly spaced `[0, 1]` grid.
    pub sup_error: f64,
    /// Share of the per-replicate coverage grid whose delta-method interval
    /// covers the truth.
    pub coverage: Option<f64>,
    pub mean_ci_width: Option<f64>,
    pub estimands: Vec<EstimandOutcome>,
}

#[derive(Debug, Clone)]
pub struct Replicate {
    pub dgp: DgpKind,
    pub n: usize,
    pub index: usize,
    pub seed: u64,
    /// A failed replicate keeps its error message.
    pub outcome: std::result::Result<ReplicateData, String>,
}

impl Replicate {
    pub fn data(&self) -> Option<&ReplicateData> {
        self.outcome.as_ref().ok()
    }
}

/// Which parts of a replicate to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Needs {
    pub band: bool,
    pub estimands: bool,
}

impl Needs {
    pub fn for_experiments(experiments: &[Experiment]) -> Self {
        Self {
            band: experiments.contains(&Experiment::Coverage),
            estimands: experiments
                .iter()
                .any(|e| matches!(e, Experiment::Efficiency | Experiment::EstimandCoverage)),
        }
    }
}

fn replicate_data(plan: &ExperimentPlan, dgp: &DgpSpec, data: &[f64], seed: u64, needs: Needs) -> Result<ReplicateData> {
    let cv_plan = CvPlan {
        seed,
        ..plan.cv.clone()
    };
    let config = SolverConfig::new(plan.solver, 1.0);
    let (cv, fit) = fit_cv(data, &cv_plan, &config)?;

    let uniform = linspace(0.0, 1.0, plan.grid_points);
    let mut sup_error = 0.0f64;
    for &x in &uniform {
        sup_error = sup_error.max((fit.density_at(x)? - dgp.density(x)?).abs());
    }

    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (coverage, mean_ci_width) = if needs.band {
        let band = delta_method_se(&fit, data, &linspace(lo, hi, plan.grid_points), &plan.delta)?;
        let mut covered = 0usize;
        for (i, &x) in band.grid_points.iter().enumerate() {
            if band.covers(i, dgp.density(x)?) {
                covered += 1;
            }
        }
        let width = band.hi.iter().zip(&band.lo).map(|(h, l)| h - l).sum::<f64>() / band.len() as f64;
        (Some(covered as f64 / band.len() as f64), Some(width))
    } else {
        (None, None)
    };

    let mut estimands = Vec::new();
    if needs.estimands {
        let tmle_cfg = plan.tmle_config();
        for spec in plan.estimand_specs()? {
            let report = tmle_target(&fit, &spec, data, &tmle_cfg)?;
            estimands.push(EstimandOutcome {
                spec,
                truth: spec.truth(dgp)?,
                plugin: report.plugin,
                tmle: report.tmle,
                classical: spec.classical_estimate(data)?,
                se: report.se,
                lo: report.ci[0],
                hi: report.ci[1],
                steps: report.steps.len(),
                converged: report.converged,
            });
        }
    }

    Ok(ReplicateData {
        fit,
        order: cv.best_order,
        lambda: cv.best_lambda,
        data_range: (lo, hi),
        sup_error,
        coverage,
        mean_ci_width,
        estimands,
    })
}

/// Runs a single replicate; failures are captured, not propagated.
pub fn simulate_replicate(plan: &ExperimentPlan, dgp: DgpKind, n: usize, r: usize, needs: Needs) -> Replicate {
    let seed = plan.replicate_seed(dgp, n, r);
    let spec = DgpSpec::new(dgp);
    let data = spec.sample(n, seed);
    let outcome = replicate_data(plan, &spec, &data, seed, needs).map_err(|e| {
        log::warn!("{dgp} n={n} replicate {r} failed: {e}");
        e.to_string()
    });
    Replicate {
        dgp,
        n,
        index: r,
        seed,
        outcome,
    }
}

/// Every replicate of every `(dgp, n)` cell, in coordinate order.
pub fn simulate(plan: &ExperimentPlan, needs: Needs) -> Result<Vec<Replicate>> {
    plan.validate()?;
    let jobs: Vec<(DgpKind, usize, usize)> = plan
        .dgp_kinds()?
        .into_iter()
        .flat_map(|d| {
            plan.sample_sizes
                .iter()
                .flat_map(move |&n| (0..plan.replicates).map(move |r| (d, n, r)))
        })
        .collect();
    let replicates: Vec<Replicate> = jobs
        .into_par_iter()
        .map(|(d, n, r)| simulate_replicate(plan, d, n, r, needs))
        .collect();
    check_failures(plan, &replicates)?;
    Ok(replicates)
}

/// Fails when any cell loses more than the tolerated share of replicates.
fn check_failures(plan: &ExperimentPlan, replicates: &[Replicate]) -> Result<()> {
    for cell in replicates.chunk_by(|a, b| a.dgp == b.dgp && a.n == b.n) {
        let failed = cell.iter().filter(|r| r.outcome.is_err()).count();
        if failed as f64 > plan.max_failure_rate * cell.len() as f64 {
            log::error!("{} n={}: {failed} of {} replicates failed", cell[0].dgp, cell[0].n, cell.len());
            return Err(Error::TooManyFailures {
                failed,
                total: cell.len(),
            });
        }
    }
    Ok(())
}

pub fn run_uniform_convergence(plan: &ExperimentPlan) -> Result<UniformConvergenceReport> {
    UniformConvergenceReport::from_replicates(&simulate(plan, Needs::default())?)
}

pub fn run_coverage(plan: &ExperimentPlan) -> Result<CoverageReport> {
    let needs = Needs {
        band: true,
        estimands: false,
    };
    CoverageReport::from_replicates(&simulate(plan, needs)?, plan.grid_points)
}

pub fn run_efficiency(plan: &ExperimentPlan) -> Result<EfficiencyReport> {
    let needs = Needs {
        band: false,
        estimands: true,
    };
    EfficiencyReport::from_replicates(&simulate(plan, needs)?)
}

pub fn run_estimand_coverage(plan: &ExperimentPlan) -> Result<EstimandCoverageReport> {
    let needs = Needs {
        band: false,
        estimands: true,
    };
    EstimandCoverageReport::from_replicates(&simulate(plan, needs)?)
}

/// The run record written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub master_seed: u64,
    pub plan: ExperimentPlan,
    pub outputs: Vec<String>,
    pub replicates_run: usize,
    pub replicates_failed: usize,
    pub wall_time_seconds: f64,
}

/// Version string of this build, in `git describe` form when available.
pub fn version_string() -> String {
    match option_env!("HAL_DENSITY_DESCRIBE") {
        Some(v) if !v.is_empty() => v.to_string(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn write_file(dir: &Path, name: &str, outputs: &mut Vec<String>, f: impl FnOnce(fs::File) -> Result<()>) -> Result<()> {
    f(fs::File::create(dir.join(name))?)?;
    outputs.push(name.to_string());
    Ok(())
}

/// Runs every experiment in the plan, writes one CSV per table plus
/// `manifest.json` into `plan.output_dir`, and returns the manifest.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Manifest> {
    plan.validate()?;
    let start = Instant::now();
    let dir = plan.output_dir.as_path();
    fs::create_dir_all(dir)?;
    let mut outputs = Vec::new();

    let density_experiments: Vec<Experiment> = plan
        .experiments
        .iter()
        .copied()
        .filter(|e| *e != Experiment::SolverBench)
        .collect();
    let mut run = 0;
    let mut failed = 0;
    if !density_experiments.is_empty() {
        let replicates = simulate(plan, Needs::for_experiments(&density_experiments))?;
        run = replicates.len();
        failed = replicates.iter().filter(|r| r.outcome.is_err()).count();
        for exp in &density_experiments {
            match exp {
                Experiment::UniformConvergence => {
                    let rep = UniformConvergenceReport::from_replicates(&replicates)?;
                    write_file(dir, "uniform_errors.csv", &mut outputs, |f| rep.write_errors_csv(f))?;
                    write_file(dir, "uniform_summary.csv", &mut outputs, |f| rep.write_summary_csv(f))?;
                    write_file(dir, "uniform_slopes.csv", &mut outputs, |f| rep.write_slopes_csv(f))?;
                }
                Experiment::Coverage => {
                    let rep = CoverageReport::from_replicates(&replicates, plan.grid_points)?;
                    write_file(dir, "coverage.csv", &mut outputs, |f| rep.write_csv(f))?;
                }
                Experiment::Efficiency => {
                    let rep = EfficiencyReport::from_replicates(&replicates)?;
                    write_file(dir, "efficiency.csv", &mut outputs, |f| rep.write_csv(f))?;
                }
                Experiment::EstimandCoverage => {
                    let rep = EstimandCoverageReport::from_replicates(&replicates)?;
                    write_file(dir, "estimand_coverage.csv", &mut outputs, |f| rep.write_csv(f))?;
                    write_file(dir, "estimand_replicates.csv", &mut outputs, |f| rep.write_records_csv(f))?;
                }
                Experiment::SolverBench => unreachable!(),
            }
        }
    }
    if plan.experiments.contains(&Experiment::SolverBench) {
        let rep = run_solver_bench(plan)?;
        write_file(dir, "solver_bench_summary.csv", &mut outputs, |f| rep.write_summary_csv(f))?;
        for (alg, trace) in &rep.traces {
            let name = format!("solver_trace_{}.csv", alg.name());
            write_file(dir, &name, &mut outputs, |f| trace.write_csv(f))?;
        }
    }

    let manifest = Manifest {
        version: version_string(),
        master_seed: plan.master_seed,
        plan: plan.clone(),
        outputs,
        replicates_run: run,
        replicates_failed: failed,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
