//! `sbsp`: fit, predict and plan user-growth studies from activity logs.

mod opts;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use sbsp_core::data::{ingest_stats, write_activity_csv, write_trigger_csv};
use sbsp_core::evaluation::{run_benchmark, BenchmarkConfig};
use sbsp_core::fit::fit;
use sbsp_core::generators::{
    draw_design_hyper, generate_bernoulli_prior, generate_dg2, generate_geometric_prior, generate_zipf, ZipfPopulation,
};
use sbsp_core::model::posterior;
use sbsp_core::planning::{global_band, invert_band, point_estimate_dm, posterior_dm};
use sbsp_core::{DayBound, FitConfig, FitResult, HyperParams, ModelKind, RngStream, SufficientStats};

use opts::{load_config, FitOpts, GeneratorKind, PlanMethod, PlanOpts, PredictOpts, SimulateOpts};

#[derive(Parser)]
#[command(name = "sbsp", version, about = "Predict and plan the growth of a user base")]
struct Cli {
    /// JSON file with command options; flags given on the command line win.
    /// For `benchmark` this is the benchmark description.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum marginal likelihood hyperparameters.
    Fit(FitOpts),
    /// Law of the number of new users over the next `--horizon` days.
    Predict(PredictOpts),
    /// Interval for the number of days until `M` users have been seen.
    Plan(PlanOpts),
    /// Synthetic activity or trigger logs.
    Simulate(SimulateOpts),
    /// Run a benchmark description and write the report tables.
    Benchmark(BenchmarkOpts),
}

#[derive(clap::Args)]
struct BenchmarkOpts {
    /// Report directory.
    #[arg(long)]
    output: PathBuf,
    /// Overrides the seed of the description.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the replication count of the description.
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(sbsp_core::Error),
}

impl From<sbsp_core::Error> for CliError {
    fn from(e: sbsp_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Fit(flags) => {
            let o = layered(config, flags)?;
            set_threads(o.threads)?;
            cmd_fit(o)
        }
        Command::Predict(flags) => {
            let o = layered(config, flags)?;
            set_threads(o.threads)?;
            cmd_predict(o)
        }
        Command::Plan(flags) => {
            let o = layered(config, flags)?;
            set_threads(o.threads)?;
            cmd_plan(o)
        }
        Command::Simulate(flags) => {
            let o = layered(config, flags)?;
            set_threads(o.threads)?;
            cmd_simulate(o)
        }
        Command::Benchmark(flags) => {
            set_threads(flags.threads)?;
            let path = config.ok_or_else(|| CliError::Usage("benchmark needs --config <description.json>".into()))?;
            cmd_benchmark(path, flags)
        }
    }
}

trait Layered: Sized + serde::de::DeserializeOwned {
    fn overlay(self, top: Self) -> Self;
}

macro_rules! layered_impl {
    ($($t:ty),*) => { $( impl Layered for $t { fn overlay(self, top: Self) -> Self { <$t>::overlay(self, top) } } )* };
}
layered_impl!(FitOpts, PredictOpts, PlanOpts, SimulateOpts);

fn layered<T: Layered>(config: Option<&Path>, flags: T) -> CliResult<T> {
    match config {
        Some(path) => Ok(load_config::<T>(path)?.overlay(flags)),
        None => Ok(flags),
    }
}

fn set_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

fn emit_json(value: &Value, output: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(sbsp_core::Error::from)?;
    match output {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| io_error(path, e)),
        None => write_stdout(format!("{text}\n").as_bytes()),
    }
}

/// A closed pipe downstream (`| head`) is not an error.
fn write_stdout(bytes: &[u8]) -> CliResult<()> {
    match std::io::stdout().lock().write_all(bytes) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_error(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(sbsp_core::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_stats(input: Option<&PathBuf>, d: Option<u32>, model: ModelKind) -> CliResult<SufficientStats> {
    let input = input.ok_or_else(|| CliError::Usage("--input is required".into()))?;
    Ok(ingest_stats(input, d, model)?)
}

fn fit_config(model: ModelKind, n_starts: Option<usize>, max_iters: Option<usize>, tol: Option<f64>) -> FitConfig {
    let mut cfg = FitConfig::for_model(model);
    if let Some(n) = n_starts {
        cfg.n_starts = n;
    }
    if let Some(n) = max_iters {
        cfg.max_iters = n;
    }
    if let Some(t) = tol {
        cfg.tol = t;
    }
    cfg
}

#[derive(Serialize)]
struct FitSummary {
    log_marginal: f64,
    converged: bool,
    n_evals: usize,
}

impl From<&FitResult> for FitSummary {
    fn from(f: &FitResult) -> Self {
        Self {
            log_marginal: f.log_marginal,
            converged: f.converged,
            n_evals: f.n_evals,
        }
    }
}

/// Given hyperparameters, or the maximum marginal likelihood fit.
fn resolve_hyper(
    stats: &SufficientStats,
    given: (Option<f64>, Option<f64>, Option<f64>),
    cfg: &FitConfig,
) -> CliResult<(HyperParams, Option<FitSummary>)> {
    match given {
        (Some(a), Some(c), Some(b)) => Ok((HyperParams::new(a, c, b)?, None)),
        (None, None, None) => {
            let f = fit(stats, cfg)?;
            Ok((f.hyper, Some(FitSummary::from(&f))))
        }
        _ => Err(CliError::Usage("--alpha, --c and --beta must be given together".into())),
    }
}

fn cmd_fit(mut o: FitOpts) -> CliResult<()> {
    let model = *o.model.get_or_insert(ModelKind::Geometric);
    o.seed.get_or_insert(0);
    let stats = load_stats(o.input.as_ref(), o.d, model)?;
    o.d = Some(stats.d);
    let cfg = fit_config(model, o.n_starts, o.max_iters, o.tol);
    let f = fit(&stats, &cfg)?;
    let out = json!({
        "model": model.short_name(),
        "d": stats.d,
        "n_observed": stats.n_users(),
        "alpha": f.hyper.alpha,
        "c": f.hyper.c,
        "beta": f.hyper.beta,
        "log_marginal": f.log_marginal,
        "converged": f.converged,
        "n_evals": f.n_evals,
        "trace": f.trace,
        "fit_config": cfg,
        "config": o,
    });
    emit_json(&out, o.output.as_deref())
}

fn cmd_predict(mut o: PredictOpts) -> CliResult<()> {
    let model = *o.model.get_or_insert(ModelKind::Geometric);
    o.seed.get_or_insert(0);
    let horizon = o.horizon.ok_or_else(|| CliError::Usage("--horizon (number of future days) is required".into()))?;
    let stats = load_stats(o.input.as_ref(), o.d, model)?;
    o.d = Some(stats.d);
    let cfg = fit_config(model, o.n_starts, o.max_iters, o.tol);
    let (hyper, fitted) = resolve_hyper(&stats, (o.alpha, o.c, o.beta), &cfg)?;
    let law = posterior(&stats, &hyper)?.predict_new_users(horizon)?;
    let out = json!({
        "D": horizon,
        "mean": law.mean(),
        "q05": law.quantile(0.05),
        "q50": law.quantile(0.5),
        "q95": law.quantile(0.95),
        "negbin": {"r": law.r, "p": law.p},
        "d": stats.d,
        "n_observed": stats.n_users(),
        "hyper": hyper,
        "fit": fitted,
        "config": o,
    });
    emit_json(&out, o.output.as_deref())
}

fn cmd_plan(mut o: PlanOpts) -> CliResult<()> {
    let model = *o.model.get_or_insert(ModelKind::Geometric);
    let seed = *o.seed.get_or_insert(0);
    let method = *o.method.get_or_insert(PlanMethod::Both);
    let level = *o.level.get_or_insert(0.95);
    let q = *o.q.get_or_insert(2000);
    let k_mc = *o.k_mc.get_or_insert(1000);
    let max_days = *o.max_days.get_or_insert(365);
    let stats = load_stats(o.input.as_ref(), o.d, model)?;
    o.d = Some(stats.d);
    let n_d = stats.n_users();
    let target_m = match (o.target, o.target_mult) {
        (Some(m), None) => m,
        (None, Some(mult)) if mult.is_finite() && mult > 0.0 => (mult * n_d as f64).ceil() as u64,
        (None, Some(mult)) => return Err(CliError::Usage(format!("--target-mult must be positive, got {mult}"))),
        _ => return Err(CliError::Usage("give exactly one of --target and --target-mult".into())),
    };
    if target_m <= n_d {
        return Err(CliError::Usage(format!(
            "target M = {target_m} is already attained: {n_d} users were seen in {} days",
            stats.d
        )));
    }
    let cfg = fit_config(model, o.n_starts, o.max_iters, o.tol);
    let (hyper, fitted) = resolve_hyper(&stats, (o.alpha, o.c, o.beta), &cfg)?;
    let post = posterior(&stats, &hyper)?;
    let point = point_estimate_dm(&post, target_m, max_days)?;
    let rng = RngStream::new(seed, 0);

    let mut out = json!({
        "d": stats.d,
        "n_observed": n_d,
        "target_m": target_m,
        "hyper": hyper,
        "fit": fitted,
        "point_estimate": point,
    });
    if matches!(method, PlanMethod::Inversion | PlanMethod::Both) {
        let horizon = match o.band_horizon {
            Some(h) => h,
            None => point.days().map_or(max_days, |days| 3 * days.max(1)),
        };
        o.band_horizon = Some(horizon);
        let band = global_band(&post, level, horizon, q, &mut rng.child(1))?;
        let interval = invert_band(&band, target_m)?;
        let csv_path = o
            .band_csv
            .clone()
            .or_else(|| o.output.as_ref().map(|p| p.with_extension("band.csv")));
        if let Some(path) = &csv_path {
            let file = File::create(path).map_err(|e| io_error(path, e))?;
            band.write_csv(BufWriter::new(file))?;
        }
        out["inversion"] = json!({
            "interval": interval,
            "band": band,
            "band_csv": csv_path,
        });
    }
    if matches!(method, PlanMethod::Posterior | PlanMethod::Both) {
        let (draws, interval) = posterior_dm(&post, target_m, k_mc, level, &mut rng.child(2))?;
        let censored = draws.iter().filter(|b| **b == DayBound::Censored).count();
        out["posterior"] = json!({
            "interval": interval,
            "n_draws": draws.len(),
            "n_censored": censored,
        });
    }
    out["config"] = serde_json::to_value(&o).map_err(sbsp_core::Error::from)?;
    emit_json(&out, o.output.as_deref())
}

fn cmd_simulate(mut o: SimulateOpts) -> CliResult<()> {
    let gen = o.gen.ok_or_else(|| CliError::Usage("--gen is required (dg1, dg2, zipf, bm-prior, gm-prior)".into()))?;
    let days = *o.days.get_or_insert(14);
    let seed = *o.seed.get_or_insert(0);
    let mut rng = RngStream::new(seed, 0);
    let mut buf = Vec::new();
    let mut hyper = None;
    let n_users = match gen {
        GeneratorKind::Zipf => {
            let pop = ZipfPopulation::new(*o.pool.get_or_insert(1_000_000), *o.gamma.get_or_insert(1.0))?;
            let data = generate_zipf(&pop, days, &mut rng)?;
            write_activity_csv(&data, &mut buf)?;
            data.n_users()
        }
        _ => {
            let c = *o.c.get_or_insert(2500.0);
            let beta = *o.beta.get_or_insert(0.5);
            let h = match o.alpha {
                Some(a) => HyperParams::new(a, c, beta)?,
                None => draw_design_hyper((4.0, 10.0), c, beta, &mut rng)?,
            };
            hyper = Some(h);
            match gen {
                GeneratorKind::Dg1 | GeneratorKind::BmPrior => {
                    let data = generate_bernoulli_prior(&h, days, &mut rng)?;
                    write_activity_csv(&data, &mut buf)?;
                    data.n_users()
                }
                GeneratorKind::Dg2 => {
                    let data = generate_dg2(&h, days, &mut rng)?;
                    write_activity_csv(&data, &mut buf)?;
                    data.n_users()
                }
                GeneratorKind::GmPrior | GeneratorKind::Zipf => {
                    let data = generate_geometric_prior(&h, days, &mut rng)?;
                    write_trigger_csv(&data, &mut buf)?;
                    data.n_users()
                }
            }
        }
    };
    match &o.output {
        Some(path) => std::fs::write(path, &buf).map_err(|e| io_error(path, e))?,
        None => write_stdout(&buf)?,
    }
    let summary = json!({"n_users": n_users, "hyper": hyper, "config": o});
    eprintln!("{summary}");
    Ok(())
}

fn cmd_benchmark(path: &Path, flags: BenchmarkOpts) -> CliResult<()> {
    let mut config: BenchmarkConfig = load_config(path)?;
    if let Some(seed) = flags.seed {
        config.seed = seed;
    }
    if let Some(n) = flags.replications {
        config.replications = n;
    }
    // Relative paths inside a description are taken from its directory.
    if let Some(ext) = &config.external_predictions {
        if ext.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            config.external_predictions = Some(base.join(ext));
        }
    }
    let report = run_benchmark(&config, &RngStream::new(config.seed, 0))?;
    let files = report.write_to_dir(&flags.output)?;
    let out = json!({
        "report_dir": flags.output,
        "files": files,
        "n_failed_replications": report.aggregates.n_failed_replications,
        "config": config,
    });
    emit_json(&out, None)
}
