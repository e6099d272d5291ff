use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentPlan;
use crate::basis::{thin_knots, BasisSpec};
use crate::dgp::{DgpKind, DgpSpec};
use crate::error::{invalid, Result};
use crate::model::{DataSummary, LogSplineModel, QuadratureGrid};
use crate::seeds::derive_seed;
use crate::solvers::{fit, Algorithm, SolverConfig, SolverTrace};

/// Stream index that keeps benchmark data apart from the replicate streams,
/// whose last coordinate is a replicate number.
const BENCH_STREAM: u64 = u64::MAX;

/// Relative gap to the best objective at which a solver counts as arrived.
pub const ARRIVAL_GAP: f64 = 1e-6;

/// One fixed problem solved by every algorithm from `β = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchPlan {
    pub dgp: String,
    pub n: usize,
    pub order: usize,
    pub lambda: f64,
    pub max_knots: Option<usize>,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            dgp: DgpKind::TruncatedNormal.name().to_string(),
            n: 200,
            order: 2,
            lambda: 2.0,
            max_knots: Some(100),
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        DgpKind::from_str(&self.dgp)?;
        if self.n < 2 {
            return Err(invalid("the benchmark needs at least two observations"));
        }
        if self.order > 2 {
            return Err(invalid("benchmark order must be 0, 1 or 2"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid("benchmark lambda must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub final_objective: f64,
    /// `(F − F_best) / |F_best|`.
    pub rel_gap: f64,
    /// First iteration within [`ARRIVAL_GAP`] of the best objective.
    pub iterations_to_gap: Option<usize>,
    pub total_flops: f64,
    pub converged: bool,
    pub final_active_set: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverBenchReport {
    pub plan: BenchPlan,
    pub best_objective: f64,
    pub rows: Vec<BenchRow>,
    pub traces: Vec<(Algorithm, SolverTrace)>,
}

impl SolverBenchReport {
    pub fn row(&self, algorithm: Algorithm) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.algorithm == algorithm)
    }

    /// `algorithm,iterations,final_objective,rel_gap,iterations_to_1e-6,total_flops,converged,final_active_set`.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "algorithm",
            "iterations",
            "final_objective",
            "rel_gap",
            "iterations_to_1e-6",
            "total_flops",
            "converged",
            "final_active_set",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.algorithm.name().to_string(),
                r.iterations.to_string(),
                r.final_objective.to_string(),
                r.rel_gap.to_string(),
                r.iterations_to_gap.map(|i| i.to_string()).unwrap_or_default(),
                r.total_flops.to_string(),
                r.converged.to_string(),
                r.final_active_set.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solves the benchmark problem with all four algorithms.
pub fn run_solver_bench(plan: &ExperimentPlan) -> Result<SolverBenchReport> {
    let bench = &plan.bench;
    bench.validate()?;
    let kind = DgpKind::from_str(&bench.dgp)?;
    let seed = derive_seed(plan.master_seed, &[kind.index(), bench.n as u64, BENCH_STREAM]);
    let data = DgpSpec::new(kind).sample(bench.n, seed);

    let mut spec = BasisSpec::data_adaptive(bench.order, &data)?;
    if let Some(m) = bench.max_knots.filter(|&m| spec.knots().len() > m) {
        spec = spec.with_knots(thin_knots(spec.knots(), m))?;
    }
    let summary = DataSummary::new(&spec, &data)?;
    let model = LogSplineModel::new(spec, QuadratureGrid::for_sample_size(bench.n));

    let mut fits = Vec::new();
    for alg in Algorithm::ALL {
        let f = fit(&model, &summary, &SolverConfig::new(alg, bench.lambda))?;
        fits.push((alg, f));
    }
    let best = fits
        .iter()
        .filter_map(|(_, f)| f.trace().final_objective())
        .fold(f64::INFINITY, f64::min);
    let gap = |obj: f64| (obj - best) / best.abs().max(f64::MIN_POSITIVE);

    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (alg, f) in fits {
        let trace = f.trace().clone();
        let last = trace.records.last().copied();
        rows.push(BenchRow {
            algorithm: alg,
            iterations: trace.len(),
            final_objective: last.map_or(f64::NAN, |r| r.objective),
            rel_gap: last.map_or(f64::NAN, |r| gap(r.objective)),
            iterations_to_gap: trace.records.iter().find(|r| gap(r.objective) <= ARRIVAL_GAP).map(|r| r.iter),
            total_flops: last.map_or(0.0, |r| r.flops),
            converged: f.converged(),
            final_active_set: last.map_or(0, |r| r.active_set),
        });
        traces.push((alg, trace));
    }

    let to_gap = |a| rows.iter().find(|r: &&BenchRow| r.algorithm == a).and_then(|r| r.iterations_to_gap);
    match (to_gap(Algorithm::ProxNewton), to_gap(Algorithm::Fista)) {
        (Some(newton), Some(fista)) if newton <= fista => {
            log::info!("prox_newton reached the {ARRIVAL_GAP:e} gap in {newton} iterations, FISTA in {fista}")
        }
        (newton, fista) => log::warn!(
            "expected prox_newton to reach the {ARRIVAL_GAP:e} gap no later than FISTA (newton {newton:?}, fista {fista:?})"
        ),
    }

    Ok(SolverBenchReport {
        plan: bench.clone(),
        best_objective: best,
        rows,
        traces,
    })
}
