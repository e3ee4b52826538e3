use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ose_cli::{
    run_bounds, run_gamma_star, run_replay, run_simulate, run_sweep, run_verify, BoundsArgs,
    CliResult, DeltaMode, GammaSpec, GammaStarArgs, Metric, NoiseMode, ReplayArgs, SimulateArgs,
    SweepArgs,
};

#[derive(Parser)]
#[command(name = "ose", version, about = "Online regularized least-squares state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Auto,
    Mean,
    Rms,
}

#[derive(Clone, Copy, ValueEnum)]
enum DeltaModeArg {
    Norm,
    Nominal,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Bounded,
    Stochastic,
}

impl From<DeltaModeArg> for DeltaMode {
    fn from(v: DeltaModeArg) -> Self {
        match v {
            DeltaModeArg::Norm => DeltaMode::Norm,
            DeltaModeArg::Nominal => DeltaMode::Nominal,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo scenario and write `t,mean_error,rms_error`.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write every run's errors and final states as JSON lines.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Write one run's measurement batches as replayable JSON lines.
        #[arg(long)]
        dump_measurements: Option<PathBuf>,
        /// Write one run's estimates as CSV.
        #[arg(long)]
        dump_estimates: Option<PathBuf>,
        /// Run index used by the per-run dumps.
        #[arg(long, default_value_t = 0)]
        dump_run: usize,
    },
    /// Run a scenario for several inertia values and write one error column per value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Error statistic per column; `auto` picks RMS for Gaussian noise.
        #[arg(long, value_enum, default_value = "auto")]
        metric: MetricArg,
    },
    /// Evaluate the asymptotic bounds over inertia values and report every constant.
    Bounds {
        /// Scenario config or ensemble file (with a `members` list).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, conflicts_with = "gamma_grid")]
        gamma: Option<f64>,
        /// `lo,hi,n`: n log-spaced values.
        #[arg(long, value_name = "LO,HI,N")]
        gamma_grid: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// JSON report path; printed to standard output when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// How scenario noise levels become norm bounds.
        #[arg(long, value_enum, default_value = "norm")]
        delta_mode: DeltaModeArg,
    },
    /// Print the bound-minimizing inertia as JSON.
    GammaStar {
        /// Scenario config or ensemble file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "bounded")]
        noise: NoiseArg,
        #[arg(long, value_enum, default_value = "norm")]
        delta_mode: DeltaModeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the estimator over a JSON-lines measurement file and write estimates as CSV.
    Replay {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        gamma: f64,
        /// Initial estimate, comma separated; zero when omitted.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the numerical invariants on a four-state instance.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_grid(text: &str) -> CliResult<GammaSpec> {
    let bad = || ose_cli::CliError::config("--gamma-grid expects lo,hi,n");
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo = parts[0].trim().parse().map_err(|_| bad())?;
    let hi = parts[1].trim().parse().map_err(|_| bad())?;
    let n = parts[2].trim().parse().map_err(|_| bad())?;
    Ok(GammaSpec::Grid(lo, hi, n))
}

fn dispatch(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::Simulate { config, out, dump, dump_measurements, dump_estimates, dump_run } => {
            run_simulate(&SimulateArgs { config, out, dump, dump_measurements, dump_estimates, dump_run })?;
        }
        Command::Sweep { config, gammas, out, metric } => {
            let metric = match metric {
                MetricArg::Auto => Metric::Auto,
                MetricArg::Mean => Metric::Mean,
                MetricArg::Rms => Metric::Rms,
            };
            run_sweep(&SweepArgs { config, gammas, out, metric })?;
        }
        Command::Bounds { input, gamma, gamma_grid, out, report, delta_mode } => {
            let gamma = match (gamma, gamma_grid) {
                (Some(g), None) => GammaSpec::Single(g),
                (None, Some(text)) => parse_grid(&text)?,
                _ => return Err(ose_cli::CliError::config("pass exactly one of --gamma or --gamma-grid")),
            };
            run_bounds(&BoundsArgs { input, gamma, out, report, delta_mode: delta_mode.into() })?;
        }
        Command::GammaStar { config, noise, delta_mode, out } => {
            let noise = match noise {
                NoiseArg::Bounded => NoiseMode::Bounded,
                NoiseArg::Stochastic => NoiseMode::Stochastic,
            };
            run_gamma_star(&GammaStarArgs { config, noise, delta_mode: delta_mode.into(), out })?;
        }
        Command::Replay { input, gamma, x0, out } => {
            run_replay(&ReplayArgs { input, gamma, x0, out })?;
        }
        Command::Verify { config } => return run_verify(config.as_deref()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
