//! Command-line front end.
//!
//! Every run writes its outputs plus a `manifest.json` into the output
//! directory. The manifest records the fully resolved command, so
//! `ouport --manifest <file>` re-executes it and reproduces every output file
//! byte for byte.

use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{
    decode_document, encode_document, flags_label, load_prices, save_prices, save_results,
    stepwise_universe, train_test_split, write_asset_nll_csv, write_stepwise_csv, LoadOptions,
    MissingPolicy, PriceMatrix, SplitSpec,
};
use crate::error::{Error, Result};
use crate::likelihood::{NllConvention, PenaltyConfig};
use crate::ou_model::{
    derive_seed, ou_from_ar, selection_instance, simulate_ou, simulate_ou_exact, OUParams,
    TimeGrid, SELECTION_DT,
};
use crate::solver::{
    fit_baseline_pgd, fit_portfolio, fit_single_series, fit_single_series_result,
    iterations_to_band, multi_start, AUpdate, FitFlag, FitResult, Init, SolverConfig,
};

pub const MANIFEST_KIND: &str = "run-manifest";
pub const MANIFEST_FILE: &str = "manifest.json";
const DEFAULT_OUT: &str = "ouport-out";

/// Exit status for usage errors (bad flags or parameter values).
pub const EXIT_USAGE: i32 = 2;
/// Exit status for unreadable, malformed or inconsistent data.
pub const EXIT_DATA: i32 = 3;
/// Exit status for fits that could not be completed.
pub const EXIT_SOLVER: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) => EXIT_USAGE,
        Error::Data(_)
        | Error::Io(_)
        | Error::FormatVersion { .. }
        | Error::DimensionMismatch { .. }
        | Error::NonFinite(_)
        | Error::SeriesTooShort { .. } => EXIT_DATA,
        _ => EXIT_SOLVER,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ouport", version, about = "Sparse mean-reverting portfolio selection by penalized OU likelihood")]
pub struct Cli {
    /// Seed for simulation and solver restarts.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for restarts, sweep cells and realizations (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Re-run the command recorded in this manifest instead of a subcommand.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    /// Report NLL summed over transitions, without the ½ ln 2π constant.
    #[arg(long, global = true)]
    pub nll_raw: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Simulate OU paths, or the five-series selection universe.
    Simulate(SimulateArgs),
    /// Fit one series, or select and fit a portfolio.
    Fit(FitArgs),
    /// Repeated single-series fits on simulated paths over a (dt, span) grid.
    RecoveryStudy(RecoveryArgs),
    /// Portfolio fits over a grid of (gamma, eta).
    Sweep(SweepArgs),
    /// Convergence traces of the partial-minimization solver and the plain baseline.
    Bench(BenchArgs),
    /// Portfolio fits on growing prefixes of a ticker ordering.
    Stepwise(StepwiseArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Fit(_) => "fit",
            Command::RecoveryStudy(_) => "recovery-study",
            Command::Sweep(_) => "sweep",
            Command::Bench(_) => "bench",
            Command::Stepwise(_) => "stepwise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Euler-Maruyama recursion.
    Euler,
    /// Exact Gaussian transition.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Four OU series and one random walk, 500 steps at dt = 0.01.
    Selection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingArg {
    Ffill,
    Drop,
    Error,
}

impl From<MissingArg> for MissingPolicy {
    fn from(m: MissingArg) -> Self {
        match m {
            MissingArg::Ffill => MissingPolicy::ForwardFill,
            MissingArg::Drop => MissingPolicy::DropRows,
            MissingArg::Error => MissingPolicy::Error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AUpdateArg {
    Gradient,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Simulate a named universe instead of independent OU paths.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, default_value_t = 2.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.25)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    #[arg(long, default_value_t = 5.0)]
    pub span: f64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Starting value (default: theta).
    #[arg(long)]
    pub x0: Option<f64>,
    #[arg(long, value_enum, default_value_t = Scheme::Euler)]
    pub scheme: Scheme,
}

/// Where prices come from and how they are windowed.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Price CSV (`timestamp,TICKER1,...`). Without it the simulated selection universe is used.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Sampling interval (default: 1 for files, 0.01 for the simulated universe).
    #[arg(long)]
    pub dt: Option<f64>,
    /// Restrict to these tickers, in this order.
    #[arg(long, value_delimiter = ',')]
    pub tickers: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long, value_enum, default_value_t = MissingArg::Ffill)]
    pub missing: MissingArg,
    /// Divide each column by the standard deviation of its levels.
    #[arg(long)]
    pub rescale: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SolveArgs {
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,
    #[arg(long, default_value_t = 5000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value_t = 1.0)]
    pub step_w: f64,
    #[arg(long, default_value_t = 1.0)]
    pub step_a: f64,
    #[arg(long, value_enum, default_value_t = AUpdateArg::Gradient)]
    pub a_update: AUpdateArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solve: SolveArgs,
    /// Fit this single column in closed form instead of selecting a portfolio.
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
}

/// One `(dt, span)` cell, written `DT:SPAN`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dt: f64,
    pub span: f64,
}

impl FromStr for Cell {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (dt, span) = s.split_once(':').ok_or_else(|| format!("expected DT:SPAN, got '{s}'"))?;
        let dt = dt.trim().parse::<f64>().map_err(|e| format!("bad dt in '{s}': {e}"))?;
        let span = span.trim().parse::<f64>().map_err(|e| format!("bad span in '{s}': {e}"))?;
        Ok(Cell { dt, span })
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.dt, self.span)
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RecoveryArgs {
    #[arg(long, default_value_t = 2.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.25)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,
    #[arg(long, value_delimiter = ',', default_values_t = default_cells())]
    pub cells: Vec<Cell>,
    #[arg(long, default_value_t = 200)]
    pub realizations: usize,
    #[arg(long, value_enum, default_value_t = Scheme::Euler)]
    pub scheme: Scheme,
}

pub fn default_cells() -> Vec<Cell> {
    vec![Cell { dt: 0.1, span: 100.0 }, Cell { dt: 0.01, span: 100.0 }, Cell { dt: 0.1, span: 500.0 }]
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solve: SolveArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.05])]
    pub gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.5])]
    pub etas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of shared initializations (uniform first, then random orthants).
    #[arg(long, default_value_t = 5)]
    pub inits: usize,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iter: usize,
    /// Stopping tolerance shared by both solvers; also the width of the target band.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct StepwiseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solve: SolveArgs,
    /// Order in which assets join the universe (default: file order).
    #[arg(long, value_delimiter = ',')]
    pub ordering: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub command: Command,
    pub seed: u64,
    pub nll_raw: bool,
    pub jobs: Option<usize>,
    pub out: PathBuf,
    pub inputs: Vec<PathBuf>,
    /// Output files, relative to `out`.
    pub outputs: Vec<String>,
    pub version: String,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let text = fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    decode_document(MANIFEST_KIND, line)
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// Human-readable lines for stdout.
    pub summary: Vec<String>,
}

/// Resolves the invocation (subcommand or manifest replay), runs it and writes the manifest.
pub fn run(cli: &Cli) -> Result<RunOutcome> {
    let mut manifest = match (&cli.manifest, &cli.command) {
        (Some(path), _) => {
            let mut m = load_manifest(path)?;
            if let Some(out) = &cli.out {
                m.out = out.clone();
            }
            if cli.jobs.is_some() {
                m.jobs = cli.jobs;
            }
            m
        }
        (None, Some(cmd)) => RunManifest {
            subcommand: cmd.name().to_string(),
            command: resolve(cmd.clone())?,
            seed: cli.seed,
            nll_raw: cli.nll_raw,
            jobs: cli.jobs,
            out: cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        (None, None) => {
            return Err(Error::InvalidParameter("a subcommand or --manifest is required".into()))
        }
    };
    manifest.inputs = inputs_of(&manifest.command);
    fs::create_dir_all(&manifest.out)?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = manifest.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let ctx = Context { seed: manifest.seed, conv: convention(manifest.nll_raw), out: manifest.out.clone() };
    let command = manifest.command.clone();
    let (outputs, summary) = pool.install(|| execute(&command, &ctx))?;

    manifest.outputs = outputs;
    let mut f = File::create(manifest.out.join(MANIFEST_FILE))?;
    writeln!(f, "{}", encode_document(MANIFEST_KIND, &manifest)?)?;
    Ok(RunOutcome { manifest, summary })
}

fn convention(raw: bool) -> NllConvention {
    if raw {
        NllConvention::Raw
    } else {
        NllConvention::PerObservation
    }
}

/// Materializes defaults that depend on other arguments and makes input paths absolute.
fn resolve(mut cmd: Command) -> Result<Command> {
    let fix = |d: &mut DataArgs| -> Result<()> {
        if let Some(p) = &d.input {
            d.input = Some(fs::canonicalize(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?);
        }
        if d.dt.is_none() {
            d.dt = Some(if d.input.is_some() { 1.0 } else { SELECTION_DT });
        }
        Ok(())
    };
    match &mut cmd {
        Command::Fit(a) => fix(&mut a.data)?,
        Command::Sweep(a) => fix(&mut a.data)?,
        Command::Bench(a) => fix(&mut a.data)?,
        Command::Stepwise(a) => fix(&mut a.data)?,
        Command::Simulate(_) | Command::RecoveryStudy(_) => {}
    }
    Ok(cmd)
}

fn inputs_of(cmd: &Command) -> Vec<PathBuf> {
    let data = match cmd {
        Command::Fit(a) => Some(&a.data),
        Command::Sweep(a) => Some(&a.data),
        Command::Bench(a) => Some(&a.data),
        Command::Stepwise(a) => Some(&a.data),
        Command::Simulate(_) | Command::RecoveryStudy(_) => None,
    };
    data.and_then(|d| d.input.clone()).into_iter().collect()
}

struct Context {
    seed: u64,
    conv: NllConvention,
    out: PathBuf,
}

impl Context {
    fn create(&self, name: &str, files: &mut Vec<String>) -> Result<File> {
        files.push(name.to_string());
        Ok(File::create(self.out.join(name))?)
    }
}

type Produced = (Vec<String>, Vec<String>);

fn execute(cmd: &Command, ctx: &Context) -> Result<Produced> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a, ctx),
        Command::Fit(a) => cmd_fit(a, ctx),
        Command::RecoveryStudy(a) => cmd_recovery(a, ctx),
        Command::Sweep(a) => cmd_sweep(a, ctx),
        Command::Bench(a) => cmd_bench(a, ctx),
        Command::Stepwise(a) => cmd_stepwise(a, ctx),
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn joined(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

// ---- simulate ----

/// Simulated paths as a price matrix with tickers `X1..Xn` (or `S1..S5` for the preset).
pub fn simulate(args: &SimulateArgs, seed: u64) -> Result<PriceMatrix> {
    if let Some(Preset::Selection) = args.preset {
        return selection_instance(seed);
    }
    if args.count < 1 {
        return Err(Error::InvalidParameter("count must be at least 1".into()));
    }
    let p = OUParams::new(args.mu, args.theta, args.sigma2)?;
    let grid = TimeGrid::new(args.dt, args.span)?;
    let paths = (0..args.count)
        .into_par_iter()
        .map(|k| {
            let s = derive_seed(seed, &[k as u64]);
            match args.scheme {
                Scheme::Euler => simulate_ou(&p, &grid, args.x0, s),
                Scheme::Exact => simulate_ou_exact(&p, &grid, args.x0, s),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = grid.steps + 1;
    let values = nalgebra::DMatrix::from_fn(rows, args.count, |i, j| paths[j].values()[i]);
    let tickers = (1..=args.count).map(|k| format!("X{k}")).collect();
    let timestamps = (0..rows).map(|i| i.to_string()).collect();
    PriceMatrix::new(values, tickers, timestamps, args.dt)
}

fn cmd_simulate(args: &SimulateArgs, ctx: &Context) -> Result<Produced> {
    let s = simulate(args, ctx.seed)?;
    let mut files = Vec::new();
    files.push("series.csv".to_string());
    save_prices(&s, ctx.out.join("series.csv"))?;
    let summary = vec![format!("wrote {} series of {} points", s.cols(), s.rows())];
    Ok((files, summary))
}

// ---- shared data handling ----

/// Loads the prices an invocation refers to: a CSV file, or the simulated selection universe.
pub fn load_data(d: &DataArgs, seed: u64) -> Result<PriceMatrix> {
    let mut s = match &d.input {
        Some(path) => {
            let opts = LoadOptions {
                missing: d.missing.into(),
                dt: d.dt.unwrap_or(1.0),
                rescale: d.rescale,
            };
            let loaded = load_prices(path, &opts)?;
            for w in &loaded.warnings {
                log::warn!("{w}");
            }
            loaded.prices
        }
        None => {
            let mut s = selection_instance(seed)?;
            if let Some(dt) = d.dt {
                s.dt = dt;
            }
            if d.rescale {
                s = s.rescaled();
            }
            s
        }
    };
    if !(s.dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {}", s.dt)));
    }
    if let Some(t) = &d.tickers {
        s = s.select_tickers(t)?;
    }
    Ok(s)
}

fn split(d: &DataArgs, s: &PriceMatrix) -> Result<(PriceMatrix, PriceMatrix)> {
    train_test_split(s, &SplitSpec { train_frac: d.train_frac })
}

pub fn solver_config(a: &SolveArgs, seed: u64) -> SolverConfig {
    SolverConfig {
        max_iter: a.max_iter,
        tol: a.tol,
        step_w: a.step_w,
        step_a: a.step_a,
        restarts: a.restarts,
        seed,
        a_update: match a.a_update {
            AUpdateArg::Gradient => AUpdate::Gradient,
            AUpdateArg::Exact => AUpdate::Exact,
        },
        ..SolverConfig::default()
    }
}

/// Multi-start portfolio fit on `train` with NLLs reported on both windows.
pub fn fit_windows(
    train: &PriceMatrix,
    test: &PriceMatrix,
    pen: &PenaltyConfig,
    cfg: &SolverConfig,
    conv: NllConvention,
) -> Result<FitResult> {
    let mut fit = multi_start(train, pen, cfg)?;
    fit.nll_train = fit.nll_on(train, conv)?;
    fit.evaluate_test(test, conv)?;
    Ok(fit)
}

/// Closed-form fit of one column of `train`, scored on both windows.
pub fn fit_column(
    train: &PriceMatrix,
    test: &PriceMatrix,
    column: &str,
    conv: NllConvention,
) -> Result<FitResult> {
    let j = train
        .ticker_index(column)
        .ok_or_else(|| Error::Data(format!("unknown ticker '{column}'")))?;
    let mut fit = fit_single_series_result(&train.column(j)?, column, train.dt, conv)?;
    fit.evaluate_test(&test.select_columns(&[j])?, conv)?;
    Ok(fit)
}

fn fit_line(fit: &FitResult) -> String {
    let (mu, sigma2) = fit.ou.map(|p| (p.mu, p.sigma2)).unwrap_or((f64::NAN, f64::NAN));
    format!(
        "mu={mu} sigma2={sigma2} theta={} w=[{}] nll_train={} nll_test={}{}",
        fit.ar.theta,
        fit.w.as_slice().iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", "),
        fit.nll_train,
        opt(fit.nll_test),
        if fit.flags.is_empty() { String::new() } else { format!(" flags={}", flags_label(&fit.flags)) },
    )
}

// ---- fit ----

fn cmd_fit(args: &FitArgs, ctx: &Context) -> Result<Produced> {
    let s = load_data(&args.data, ctx.seed)?;
    let (train, test) = split(&args.data, &s)?;
    let fit = match (&args.column, s.cols()) {
        (Some(col), _) => fit_column(&train, &test, col, ctx.conv)?,
        (None, 1) => fit_column(&train, &test, &s.tickers[0].clone(), ctx.conv)?,
        (None, _) => {
            let pen = PenaltyConfig::new(args.gamma, args.eta)?;
            fit_windows(&train, &test, &pen, &solver_config(&args.solve, ctx.seed), ctx.conv)?
        }
    };

    let mut files = Vec::new();
    files.push("fit.jsonl".to_string());
    save_results(std::slice::from_ref(&fit), ctx.out.join("fit.jsonl"))?;

    let mut w = csv::Writer::from_writer(ctx.create("fit_weights.csv", &mut files)?);
    w.write_record(["ticker", "weight"])?;
    for (t, x) in fit.tickers.iter().zip(fit.w.as_slice()) {
        w.write_record([t.clone(), x.to_string()])?;
    }
    w.flush()?;

    Ok((files, vec![fit_line(&fit)]))
}

// ---- recovery study ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCell {
    pub dt: f64,
    pub span: f64,
    pub steps: usize,
    /// `(mu_hat, sigma2_hat)` per realization; `None` where the fit had no OU reading.
    pub estimates: Vec<Option<(f64, f64)>>,
    /// Mean of `|mu_hat - mu| / |mu|` over successful realizations.
    pub dev_mu: f64,
    pub dev_sigma2: f64,
}

impl RecoveryCell {
    pub fn failures(&self) -> usize {
        self.estimates.iter().filter(|e| e.is_none()).count()
    }
}

/// Simulates and refits `realizations` paths per cell.
pub fn recovery_study(args: &RecoveryArgs, seed: u64) -> Result<Vec<RecoveryCell>> {
    let p = OUParams::new(args.mu, args.theta, args.sigma2)?;
    if args.realizations < 1 {
        return Err(Error::InvalidParameter("realizations must be at least 1".into()));
    }
    args.cells
        .iter()
        .enumerate()
        .map(|(ci, cell)| {
            let grid = TimeGrid::new(cell.dt, cell.span)?;
            let estimates = (0..args.realizations)
                .into_par_iter()
                .map(|r| {
                    let s = derive_seed(seed, &[ci as u64, r as u64]);
                    let x = match args.scheme {
                        Scheme::Euler => simulate_ou(&p, &grid, None, s)?,
                        Scheme::Exact => simulate_ou_exact(&p, &grid, None, s)?,
                    };
                    Ok(fit_single_series(&x)
                        .and_then(|ar| ou_from_ar(&ar, grid.dt))
                        .ok()
                        .map(|q| (q.mu, q.sigma2)))
                })
                .collect::<Result<Vec<_>>>()?;
            let ok: Vec<(f64, f64)> = estimates.iter().flatten().copied().collect();
            let n = ok.len() as f64;
            let dev_mu = ok.iter().map(|e| (e.0 - p.mu).abs() / p.mu.abs()).sum::<f64>() / n;
            let dev_sigma2 = ok.iter().map(|e| (e.1 - p.sigma2).abs() / p.sigma2.abs()).sum::<f64>() / n;
            Ok(RecoveryCell { dt: cell.dt, span: cell.span, steps: grid.steps, estimates, dev_mu, dev_sigma2 })
        })
        .collect()
}

fn cmd_recovery(args: &RecoveryArgs, ctx: &Context) -> Result<Produced> {
    let cells = recovery_study(args, ctx.seed)?;
    let mut files = Vec::new();
    let mut summary = Vec::new();

    let mut w = csv::Writer::from_writer(ctx.create("recovery.csv", &mut files)?);
    w.write_record(["dt", "span", "steps", "realizations", "failures", "dev_mu", "dev_sigma2"])?;
    for c in &cells {
        w.write_record([
            c.dt.to_string(),
            c.span.to_string(),
            c.steps.to_string(),
            c.estimates.len().to_string(),
            c.failures().to_string(),
            num(c.dev_mu),
            num(c.dev_sigma2),
        ])?;
        summary.push(format!(
            "dt={} span={}: dev(mu)={:.4} dev(sigma2)={:.4}",
            c.dt, c.span, c.dev_mu, c.dev_sigma2
        ));
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(ctx.create("recovery_estimates.csv", &mut files)?);
    w.write_record(["dt", "span", "realization", "mu_hat", "sigma2_hat"])?;
    for c in &cells {
        for (r, e) in c.estimates.iter().enumerate() {
            w.write_record([
                c.dt.to_string(),
                c.span.to_string(),
                r.to_string(),
                opt(e.map(|v| v.0)),
                opt(e.map(|v| v.1)),
            ])?;
        }
    }
    w.flush()?;
    Ok((files, summary))
}

// ---- sweep ----

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub gamma: f64,
    pub eta: f64,
    pub fit: std::result::Result<FitResult, String>,
}

/// One multi-start fit per `(gamma, eta)` pair, cells in row-major order (gamma outer).
pub fn sweep(
    train: &PriceMatrix,
    test: &PriceMatrix,
    gammas: &[f64],
    etas: &[f64],
    cfg: &SolverConfig,
    conv: NllConvention,
) -> Result<Vec<SweepCell>> {
    let grid: Vec<(f64, f64)> =
        gammas.iter().flat_map(|&g| etas.iter().map(move |&e| (g, e))).collect();
    if grid.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one gamma and one eta".into()));
    }
    let pens = grid.iter().map(|&(g, e)| PenaltyConfig::new(g, e)).collect::<Result<Vec<_>>>()?;
    Ok(grid
        .par_iter()
        .zip(pens.par_iter())
        .map(|(&(gamma, eta), pen)| SweepCell {
            gamma,
            eta,
            fit: fit_windows(train, test, pen, cfg, conv).map_err(|e| e.to_string()),
        })
        .collect())
}

fn cmd_sweep(args: &SweepArgs, ctx: &Context) -> Result<Produced> {
    let s = load_data(&args.data, ctx.seed)?;
    let (train, test) = split(&args.data, &s)?;
    let cfg = solver_config(&args.solve, ctx.seed);
    let cells = sweep(&train, &test, &args.gammas, &args.etas, &cfg, ctx.conv)?;

    let mut files = Vec::new();
    let mut summary = Vec::new();
    let mut w = csv::Writer::from_writer(ctx.create("sweep.csv", &mut files)?);
    w.write_record([
        "gamma", "eta", "mu", "sigma2", "theta", "a", "c", "objective", "nll_train", "nll_test",
        "weights", "flags",
    ])?;
    let mut fits = Vec::new();
    for cell in &cells {
        match &cell.fit {
            Ok(fit) => {
                w.write_record([
                    cell.gamma.to_string(),
                    cell.eta.to_string(),
                    opt(fit.ou.map(|p| p.mu)),
                    opt(fit.ou.map(|p| p.sigma2)),
                    fit.ar.theta.to_string(),
                    fit.ar.a.to_string(),
                    fit.ar.c.to_string(),
                    fit.objective.to_string(),
                    fit.nll_train.to_string(),
                    opt(fit.nll_test),
                    joined(fit.w.as_slice()),
                    flags_label(&fit.flags),
                ])?;
                summary.push(format!("gamma={} eta={}: {}", cell.gamma, cell.eta, fit_line(fit)));
                fits.push(fit.clone());
            }
            Err(e) => {
                log::warn!("sweep cell gamma={} eta={} failed: {e}", cell.gamma, cell.eta);
                let mut row = vec![cell.gamma.to_string(), cell.eta.to_string()];
                row.extend(std::iter::repeat_n(String::new(), 9));
                row.push(flags_label(&[FitFlag::FitFailed].into()));
                w.write_record(row)?;
                summary.push(format!("gamma={} eta={}: failed ({e})", cell.gamma, cell.eta));
            }
        }
    }
    w.flush()?;
    files.push("sweep.jsonl".to_string());
    save_results(&fits, ctx.out.join("sweep.jsonl"))?;
    Ok((files, summary))
}

// ---- bench ----

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub init: usize,
    pub algorithm: FitResult,
    pub baseline: FitResult,
    /// Target objective: the partial-minimization solver's final value.
    pub target: f64,
    pub band: f64,
    pub algorithm_to_band: Option<usize>,
    pub baseline_to_band: Option<usize>,
}

/// Runs both solvers from each shared initialization; `init` 0 is the uniform portfolio.
pub fn bench(
    s: &PriceMatrix,
    pen: &PenaltyConfig,
    inits: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<BenchRun>> {
    if inits < 1 {
        return Err(Error::InvalidParameter("inits must be at least 1".into()));
    }
    let base = SolverConfig { max_iter, tol, seed, ..SolverConfig::default() };
    base.validate()?;
    (0..inits)
        .into_par_iter()
        .map(|k| {
            let w0 = crate::solver::initial_weights(s.cols(), &base, k)?;
            let cfg = SolverConfig { init: Init::Provided(w0.as_slice().to_vec()), ..base.clone() };
            let algorithm = fit_portfolio(s, pen, &cfg)?;
            let baseline = fit_baseline_pgd(s, pen, &cfg)?;
            let target = algorithm.objective;
            let band = tol * target.abs().max(1.0);
            Ok(BenchRun {
                init: k,
                algorithm_to_band: iterations_to_band(&algorithm.trace, target, band),
                baseline_to_band: iterations_to_band(&baseline.trace, target, band),
                algorithm,
                baseline,
                target,
                band,
            })
        })
        .collect()
}

fn cmd_bench(args: &BenchArgs, ctx: &Context) -> Result<Produced> {
    let s = load_data(&args.data, ctx.seed)?;
    let (train, _) = split(&args.data, &s)?;
    let pen = PenaltyConfig::new(args.gamma, args.eta)?;
    let runs = bench(&train, &pen, args.inits, args.max_iter, args.tol, ctx.seed)?;

    let mut files = Vec::new();
    let mut summary = Vec::new();
    let mut w = csv::Writer::from_writer(ctx.create("bench_trace.csv", &mut files)?);
    w.write_record(["init", "solver", "iteration", "loss"])?;
    for run in &runs {
        for (name, fit) in [("partial-minimization", &run.algorithm), ("baseline", &run.baseline)] {
            for (i, v) in fit.trace.iter().enumerate() {
                w.write_record([run.init.to_string(), name.to_string(), i.to_string(), num(*v)])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(ctx.create("bench_summary.csv", &mut files)?);
    w.write_record(["init", "solver", "iterations", "final_objective", "target", "band", "iterations_to_band"])?;
    for run in &runs {
        for (name, fit, hit) in [
            ("partial-minimization", &run.algorithm, run.algorithm_to_band),
            ("baseline", &run.baseline, run.baseline_to_band),
        ] {
            w.write_record([
                run.init.to_string(),
                name.to_string(),
                fit.iterations.to_string(),
                num(fit.objective),
                num(run.target),
                num(run.band),
                hit.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        let show = |h: Option<usize>| h.map(|v| v.to_string()).unwrap_or_else(|| "never".into());
        summary.push(format!(
            "init {}: partial-minimization {} iterations, baseline {} (to band of {})",
            run.init,
            show(run.algorithm_to_band),
            show(run.baseline_to_band),
            run.target
        ));
    }
    w.flush()?;
    Ok((files, summary))
}

// ---- stepwise ----

fn cmd_stepwise(args: &StepwiseArgs, ctx: &Context) -> Result<Produced> {
    let s = load_data(&args.data, ctx.seed)?;
    let ordering = args.ordering.clone().unwrap_or_else(|| s.tickers.clone());
    let pen = PenaltyConfig::new(args.gamma, args.eta)?;
    let cfg = solver_config(&args.solve, ctx.seed);
    let table = stepwise_universe(
        &s,
        &ordering,
        &pen,
        &cfg,
        &SplitSpec { train_frac: args.data.train_frac },
        ctx.conv,
    )?;

    let mut files = Vec::new();
    write_stepwise_csv(&table, ctx.create("stepwise.csv", &mut files)?)?;
    write_asset_nll_csv(&table, ctx.create("stepwise_assets.csv", &mut files)?)?;
    let summary = table
        .rows
        .iter()
        .map(|r| format!("k={} [{}]: train={} test={}", r.k, r.assets.join(","), opt(r.nll_train), opt(r.nll_test)))
        .collect();
    Ok((files, summary))
}
