//! `hal-density`: fit, evaluate and target log-spline density estimates from
//! the command line.
//!
//! Exit status is 0 on success, 1 when a numerical routine fails and 2 for
//! usage, input or I/O errors.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hal_density::dgp::DgpSpec;
use hal_density::inference::{delta_method_se, linspace, DeltaConfig};
use hal_density::io::{read_data, write_lines};
use hal_density::selection::{cross_validate, undersmooth, CvPlan};
use hal_density::sim::{run_plan, ExperimentPlan};
use hal_density::solvers;
use hal_density::targeting::{tmle_target, EstimandSpec, TmleConfig};
use hal_density::trend::{admm_fit, fit_tf_cv, AdmmConfig, TfCvPlan, TfFit, TfProblem, TfVariant};
use hal_density::{Algorithm, DataSummary, FittedDensity, LogSplineModel, QuadratureGrid, SolverConfig};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "hal-density", version, about = "L1-penalized log-spline density estimation on [0, 1]")]
struct Cli {
    /// Seed for fold assignment, sampling and simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a density and write the model as JSON.
    Fit(FitArgs),
    /// Evaluate a fitted model, optionally with delta-method bands.
    Eval(EvalArgs),
    /// Plug-in and targeted estimate of a summary of the density.
    Target(TargetArgs),
    /// Trend-filtering fit on a uniform histogram grid.
    Tf(TfArgs),
    /// Run a Monte Carlo plan.
    Simulate(SimulateArgs),
    /// Draw a sample from a reference distribution.
    Sample(SampleArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Newline-delimited numbers in [0, 1], or CSV with --col.
    data: PathBuf,
    /// CSV column (header name or zero-based index).
    #[arg(long)]
    col: Option<String>,
}

impl DataArgs {
    fn load(&self) -> Result<Vec<f64>> {
        read_data(&self.data, self.col.as_deref()).with_context(|| format!("reading {}", self.data.display()))
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Basis order; cross-validation searches 0, 1 and 2 when omitted.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
    order: Option<u8>,
    /// Fixed penalty.
    #[arg(long, conflicts_with = "cv")]
    lambda: Option<f64>,
    /// Choose the penalty (and order) by cross-validation; the default.
    #[arg(long)]
    cv: bool,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value = "prox_newton")]
    solver: Algorithm,
    /// Quadrature bins; defaults to max(1000, 2n).
    #[arg(long)]
    grid: Option<usize>,
    /// Cap on the number of knots (0 keeps one per distinct observation).
    #[arg(long, default_value_t = 50)]
    max_knots: usize,
    /// Multiplier on the selected L1 norm.
    #[arg(long, default_value_t = 1.0)]
    undersmooth: f64,
    /// Model JSON destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    model: PathBuf,
    /// Evenly spaced points on [0, 1].
    #[arg(long, default_value_t = 201)]
    grid_points: usize,
    /// Evaluate at these points instead of a grid.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    at: Vec<f64>,
    /// Add delta-method se, lo and hi columns (needs --data).
    #[arg(long, requires = "data")]
    ci: bool,
    /// The sample the model was fitted to.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    col: Option<String>,
    /// Ridge multiplier for the information inverse.
    #[arg(long, default_value_t = 1e-3)]
    ridge: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TargetArgs {
    model: PathBuf,
    #[command(flatten)]
    input: DataArgs,
    /// mean, moment:M, second_moment, survival:X, cdf:X, median or quantile:Q.
    #[arg(long)]
    estimand: EstimandSpec,
    #[arg(long, default_value_t = 0)]
    min_steps: usize,
    #[arg(long, default_value_t = 10)]
    max_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TfArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Difference order; cross-validation searches 0, 1 and 2 when omitted.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
    order: Option<u8>,
    #[arg(long, conflicts_with = "cv")]
    lambda: Option<f64>,
    /// Choose the penalty by cross-validation; the default.
    #[arg(long)]
    cv: bool,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Number of bins; defaults to n + 1.
    #[arg(long)]
    bins: Option<usize>,
    /// Penalize the polynomial part as well (TFPP).
    #[arg(long)]
    tfpp: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Plan JSON; omitted fields take their defaults.
    plan: PathBuf,
    /// Overrides the plan's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides the plan's replicate count.
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    /// DGP name, long or short form (e.g. truncated_normal or TN).
    #[arg(long)]
    dgp: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// File when a path is given, stdout otherwise.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn cmd_fit(args: &FitArgs, seed: u64) -> Result<()> {
    let data = args.input.load()?;
    let n = data.len();
    let max_knots = (args.max_knots > 0).then_some(args.max_knots);
    let mut cv_plan = CvPlan {
        folds: args.folds,
        seed,
        max_knots,
        undersmooth_factor: args.undersmooth,
        ..CvPlan::default()
    };
    if let Some(k) = args.order {
        cv_plan.orders = vec![k as usize];
    }
    cv_plan.validate()?;
    let config = SolverConfig::new(args.solver, 1.0);

    let (order, lambda) = match args.lambda {
        Some(l) if !args.cv => (args.order.map_or(1, usize::from), l),
        _ => {
            let cv = cross_validate(&data, &cv_plan, &config)?;
            (cv.best_order, cv.best_lambda)
        }
    };
    let spec = cv_plan.basis(order, &data)?;
    let grid = match args.grid {
        Some(g) => QuadratureGrid::uniform(g)?,
        None => QuadratureGrid::for_sample_size(n),
    };
    let summary = DataSummary::new(&spec, &data)?;
    let model = LogSplineModel::new(spec.clone(), grid);
    let cfg = config.with_lambda(lambda);
    let fit = solvers::fit(&model, &summary, &cfg)?;
    let fit = undersmooth(&fit, &summary, args.undersmooth, &cfg)?;

    let active_knots = fit.active_set().iter().filter(|&&j| j >= spec.num_parametric()).count();
    let nll = -data.iter().map(|&x| fit.density_at(x).map(f64::ln)).sum::<hal_density::Result<f64>>()? / n as f64;
    let summary_line = format!(
        "n={n} k={order} lambda={lambda} active_knots={active_knots} knots={} nll={nll:.6} converged={}",
        spec.knots().len(),
        fit.converged()
    );
    output(args.out.as_deref())?.write_all(fit.to_json()?.as_bytes())?;
    if args.out.is_some() {
        println!("{summary_line}");
    } else {
        eprintln!("{summary_line}");
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<FittedDensity> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FittedDensity::from_json(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let fit = load_model(&args.model)?;
    let xs = if args.at.is_empty() {
        if args.grid_points < 1 {
            bail!(hal_density::Error::InvalidArgument("--grid-points must be positive".into()));
        }
        linspace(0.0, 1.0, args.grid_points)
    } else {
        args.at.clone()
    };
    let mut w = io::BufWriter::new(output(args.out.as_deref())?);
    if args.ci {
        let path = args.data.as_ref().expect("clap enforces --data with --ci");
        let data = read_data(path, args.col.as_deref()).with_context(|| format!("reading {}", path.display()))?;
        let config = DeltaConfig {
            ridge_constant: args.ridge,
            ..DeltaConfig::default()
        };
        let band = delta_method_se(&fit, &data, &xs, &config)?;
        writeln!(w, "x,density,se,lo,hi")?;
        for i in 0..band.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                band.grid_points[i], band.density[i], band.se[i], band.lo[i], band.hi[i]
            )?;
        }
    } else {
        writeln!(w, "x,density")?;
        for &x in &xs {
            writeln!(w, "{x},{}", fit.density_at(x)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_target(args: &TargetArgs) -> Result<()> {
    let fit = load_model(&args.model)?;
    let data = args.input.load()?;
    let config = TmleConfig {
        min_steps: args.min_steps,
        max_steps: args.max_steps,
        ..TmleConfig::default()
    };
    let report = tmle_target(&fit, &args.estimand, &data, &config)?;
    let mut w = output(args.out.as_deref())?;
    writeln!(w, "{}", report.to_json()?)?;
    Ok(())
}

fn tf_fit(args: &TfArgs, data: &[f64], seed: u64) -> Result<TfFit> {
    let variant = if args.tfpp {
        TfVariant::ParametricPenalized
    } else {
        TfVariant::Standard
    };
    let config = AdmmConfig::default();
    match args.lambda {
        Some(lambda) if !args.cv => {
            let mut problem = TfProblem::new(data, args.bins, args.order.map_or(1, usize::from), lambda)?;
            if args.tfpp {
                problem = problem.tfpp_variant();
            }
            Ok(admm_fit(&problem, &config)?)
        }
        _ => {
            let mut plan = TfCvPlan {
                folds: args.folds,
                seed,
                bins: args.bins,
                variant,
                ..TfCvPlan::default()
            };
            if let Some(k) = args.order {
                plan.orders = vec![k as usize];
            }
            let (cv, fit) = fit_tf_cv(data, &plan, &config)?;
            eprintln!("selected order={} lambda={}", cv.best_order, cv.best_lambda);
            Ok(fit)
        }
    }
}

fn cmd_tf(args: &TfArgs, seed: u64) -> Result<()> {
    let data = args.input.load()?;
    let fit = tf_fit(args, &data, seed)?;
    let mut w = output(args.out.as_deref())?;
    fit.write_csv(&mut w)?;
    let line = format!(
        "bins={} order={} lambda={} iterations={} converged={} objective={:.6}",
        fit.bins(),
        fit.problem.order,
        fit.problem.lambda,
        fit.iterations,
        fit.converged,
        fit.objective()?
    );
    if args.out.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, seed: Option<u64>) -> Result<()> {
    let mut plan = ExperimentPlan::from_file(&args.plan).with_context(|| format!("loading {}", args.plan.display()))?;
    if let Some(s) = seed {
        plan.master_seed = s;
    }
    if let Some(dir) = &args.out_dir {
        plan.output_dir = dir.clone();
    }
    if let Some(r) = args.replicates {
        plan.replicates = r;
    }
    let manifest = run_plan(&plan)?;
    println!(
        "wrote {} files to {} ({} replicates, {} failed, {:.1}s)",
        manifest.outputs.len() + 1,
        plan.output_dir.display(),
        manifest.replicates_run,
        manifest.replicates_failed,
        manifest.wall_time_seconds
    );
    Ok(())
}

fn cmd_sample(args: &SampleArgs, seed: u64) -> Result<()> {
    let dgp = DgpSpec::by_name(&args.dgp)?;
    let data = dgp.sample(args.n, seed);
    write_lines(io::BufWriter::new(output(args.out.as_deref())?), &data)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Target(a) => cmd_target(a),
        Command::Tf(a) => cmd_tf(a, seed),
        Command::Simulate(a) => cmd_simulate(a, cli.seed),
        Command::Sample(a) => cmd_sample(a, seed),
    }
}

/// 1 for numerical failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<hal_density::Error>())
        .any(|e| e.is_numerical());
    if numerical {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
