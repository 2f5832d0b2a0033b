//! Experiment runner: `nmsse <mode> [--config file.toml] [overrides…]`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 validation failure.

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Validation(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            CliError::Validation(msg) => write!(f, "validation failure: {msg}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "nmsse",
    about = "Stochastic trajectories of non-Markovian Schrödinger equations via time-local auxiliary-noise averaging",
    version
)]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
}

#[derive(Subcommand)]
enum Mode {
    /// Average the time-local equation over auxiliary draws for one fixed
    /// driving field; emits the estimate with error bars and, when the
    /// commuting oracle applies, the exact trajectory.
    LinearTraj(CommonArgs),
    /// One norm-preserving trajectory via the inductive field shift.
    NonlinearTraj(CommonArgs),
    /// Two-batch density-matrix estimate at the snapshot times.
    Density(CommonArgs),
    /// Distributions of the first coupling's expectation value: nonlinear
    /// sampling vs reweighted linear sampling, with histograms and a KS test.
    Histogram(CommonArgs),
    /// Run the aggregated invariant suite; nonzero exit on any failure.
    Validate(CommonArgs),
    /// Export kernels and verify sampler statistics and the Gaussian
    /// characteristic identity.
    CovarianceCheck(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration; built-in worked-example defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    n_xi: Option<usize>,
    #[arg(long)]
    n_eta: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker cap for Monte Carlo loops (results are worker-independent).
    #[arg(long)]
    threads: Option<usize>,
    /// exp_midpoint | euler
    #[arg(long)]
    scheme: Option<String>,
    /// oracle | mc
    #[arg(long)]
    inner: Option<String>,
}

impl Mode {
    fn name(&self) -> &'static str {
        match self {
            Mode::LinearTraj(_) => "linear-traj",
            Mode::NonlinearTraj(_) => "nonlinear-traj",
            Mode::Density(_) => "density",
            Mode::Histogram(_) => "histogram",
            Mode::Validate(_) => "validate",
            Mode::CovarianceCheck(_) => "covariance-check",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Mode::LinearTraj(a)
            | Mode::NonlinearTraj(a)
            | Mode::Density(a)
            | Mode::Histogram(a)
            | Mode::Validate(a)
            | Mode::CovarianceCheck(a) => a,
        }
    }
}

fn apply_overrides(config: &mut ExperimentConfig, args: &CommonArgs) {
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    if let Some(dt) = args.dt {
        config.grid.dt = dt;
    }
    if let Some(t_max) = args.t_max {
        config.grid.t_max = t_max;
    }
    if let Some(n_xi) = args.n_xi {
        config.run.n_xi = n_xi;
    }
    if let Some(n_eta) = args.n_eta {
        config.run.n_eta = n_eta;
    }
    if let Some(dir) = &args.out_dir {
        config.output.dir = dir.to_string_lossy().into_owned();
    }
    if let Some(threads) = args.threads {
        config.run.threads = threads;
    }
    if let Some(scheme) = &args.scheme {
        config.run.scheme = scheme.clone();
    }
    if let Some(inner) = &args.inner {
        config.run.inner = inner.clone();
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let args = cli.mode.args();
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(&mut config, args);

    if config.run.threads > 0 {
        // Results are independent of the worker count by construction; the
        // cap only bounds resources. Ignore failure if a pool exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.run.threads)
            .build_global();
    }

    let base_dir = args
        .config
        .as_deref()
        .and_then(|p| p.parent())
        .unwrap_or_else(|| std::path::Path::new("."))
        .to_path_buf();
    let needs_snapshots = matches!(cli.mode, Mode::Density(_) | Mode::Histogram(_));
    let resolved = config.resolve(&base_dir, needs_snapshots)?;

    let outcome = runner::run_mode(cli.mode.name(), &config, &resolved)?;
    for (key, value) in &outcome.summary {
        println!("{key}: {value}");
    }
    if !outcome.failures.is_empty() {
        return Err(CliError::Validation(outcome.failures.join(", ")));
    }
    println!("outputs written to {}", resolved.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            match err {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Numerical(_) => ExitCode::from(3),
                CliError::Validation(_) => ExitCode::from(4),
            }
        }
    }
}
