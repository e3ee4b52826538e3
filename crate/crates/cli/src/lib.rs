//! Subcommand implementations for the `ose` binary.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 numerical
//! failure, 4 I/O error.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use ose_core::analysis::{
    ensemble_constants, gamma_star_bounded, gamma_star_stochastic, h_bounded, h_stochastic,
    log_grid, observability_window, psi, BoundReport, EnsembleMember, SystemEnsemble,
};
use ose_core::estimator::{update, EstimatorConfig, EstimatorState, DEFAULT_RANK_TOLERANCE};
use ose_core::io::{
    batch_to_json, estimate_header, format_float, write_csv_row, write_estimate_row,
    write_summary_csv, BatchReader, ReadError,
};
use ose_core::simulation::{Experiment, NoiseModel, ScenarioConfig};
use ose_core::verify::run_invariant_suite;

/// Interval searched for the stochastic-noise optimum.
pub const SEARCH_INTERVAL: (f64, f64) = (1e-4, 1e4);

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(path: &Path, err: io::Error) -> Self {
        Self { code: 4, message: format!("{}: {err}", path.display()) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ose_core::Error> for CliError {
    fn from(e: ose_core::Error) -> Self {
        let code = if e.is_numerical() { 3 } else { 2 };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn load_scenario(path: &Path) -> CliResult<ScenarioConfig> {
    let sc: ScenarioConfig = serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    sc.validate()?;
    Ok(sc)
}

/// Constants printed before a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunHeader {
    pub psi: f64,
    /// Window of run 0's sequence; `None` when no window length observes the state.
    pub tau: Option<usize>,
    pub lambda_bar: f64,
    pub c: f64,
}

pub fn run_header(exp: &Experiment) -> CliResult<RunHeader> {
    let k = ensemble_constants(exp.ensemble())?;
    Ok(RunHeader {
        psi: psi(exp.ensemble(), exp.scenario().gamma)?,
        tau: observability_window(&exp.sequence_for(0)?, exp.ensemble())?,
        lambda_bar: k.lambda_bar,
        c: k.c,
    })
}

fn print_header(h: &RunHeader) {
    let tau = h.tau.map_or("none".to_string(), |t| t.to_string());
    eprintln!(
        "psi = {}, tau = {tau}, lambda_bar = {}, c = {}",
        format_float(h.psi),
        format_float(h.lambda_bar),
        format_float(h.c)
    );
}

#[derive(Debug, Clone, Default)]
pub struct SimulateArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    /// Per-run results as JSON lines.
    pub dump: Option<PathBuf>,
    /// Measurement batches of run `dump_run` as JSON lines, replayable.
    pub dump_measurements: Option<PathBuf>,
    /// Estimate CSV of run `dump_run`.
    pub dump_estimates: Option<PathBuf>,
    pub dump_run: usize,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    run: usize,
    seed: u64,
    sequence: &'a [usize],
    per_step_error: &'a [f64],
    final_state: &'a [f64],
    final_estimate: &'a [f64],
}

pub fn run_simulate(args: &SimulateArgs) -> CliResult<()> {
    let sc = load_scenario(&args.config)?;
    let exp = Experiment::new(sc)?;
    print_header(&run_header(&exp)?);
    let summary = exp.monte_carlo()?;
    let mut out = create(&args.out)?;
    write_summary_csv(&mut out, &summary).map_err(|e| CliError::io(&args.out, e))?;
    finish(out, &args.out)?;

    if let Some(path) = &args.dump {
        let mut w = create(path)?;
        for i in 0..exp.scenario().n_runs {
            let run = exp.run(i)?;
            let rec = RunRecord {
                run: i,
                seed: run.seed_used,
                sequence: &run.sequence,
                per_step_error: &run.per_step_error,
                final_state: run.final_state.as_slice(),
                final_estimate: run.final_estimate.as_slice(),
            };
            let line = serde_json::to_string(&rec).expect("plain data serializes");
            writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
        }
        finish(w, path)?;
    }

    if args.dump_measurements.is_some() || args.dump_estimates.is_some() {
        if args.dump_run >= exp.scenario().n_runs {
            return Err(CliError::config(format!(
                "dump run {} out of range for {} runs",
                args.dump_run,
                exp.scenario().n_runs
            )));
        }
        let (_, trace) = exp.trace(args.dump_run)?;
        if let Some(path) = &args.dump_measurements {
            let mut w = create(path)?;
            for b in &trace.batches {
                writeln!(w, "{}", batch_to_json(b)).map_err(|e| CliError::io(path, e))?;
            }
            finish(w, path)?;
        }
        if let Some(path) = &args.dump_estimates {
            let mut w = create(path)?;
            let io_err = |e| CliError::io(path, e);
            writeln!(w, "{}", estimate_header(exp.scenario().n_states)).map_err(io_err)?;
            for (t, x) in trace.estimates.iter().enumerate().skip(1) {
                write_csv_row(&mut w, &t.to_string(), x.as_slice()).map_err(io_err)?;
            }
            finish(w, path)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// Bounded noise: mean error. Gaussian noise: RMS error.
    #[default]
    Auto,
    Mean,
    Rms,
}

#[derive(Debug, Clone, Default)]
pub struct SweepArgs {
    pub config: PathBuf,
    pub gammas: Vec<f64>,
    pub out: PathBuf,
    pub metric: Metric,
}

pub fn run_sweep(args: &SweepArgs) -> CliResult<()> {
    if args.gammas.is_empty() {
        return Err(CliError::config("at least one gamma is required"));
    }
    if let Some(g) = args.gammas.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
        return Err(CliError::config(format!("gamma must be positive, got {g}")));
    }
    let sc = load_scenario(&args.config)?;
    let rms = match args.metric {
        Metric::Auto => matches!(sc.noise, NoiseModel::Gaussian { .. }),
        Metric::Mean => false,
        Metric::Rms => true,
    };
    let base = Experiment::new(sc)?;
    print_header(&run_header(&base)?);
    let mut columns = Vec::with_capacity(args.gammas.len());
    for &g in &args.gammas {
        let s = base.with_gamma(g)?.monte_carlo()?;
        columns.push(if rms { s.rms_error } else { s.mean_error });
    }
    let mut w = create(&args.out)?;
    let io_err = |e| CliError::io(&args.out, e);
    let mut header = String::from("t");
    for g in &args.gammas {
        header.push_str(&format!(",err_gamma_{}", format_float(*g)));
    }
    writeln!(w, "{header}").map_err(io_err)?;
    let mut row = vec![0.0; columns.len()];
    for t in 0..base.scenario().horizon {
        for (slot, col) in row.iter_mut().zip(&columns) {
            *slot = col[t];
        }
        write_csv_row(&mut w, &(t + 1).to_string(), &row).map_err(io_err)?;
    }
    finish(w, &args.out)
}

/// How scenario `Δx`, `Δn` become the norm bounds entering the asymptotic bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaMode {
    /// `√N·Δx/2` and `√M·Δn/2`: worst-case norms of the per-coordinate uniform draws.
    #[default]
    Norm,
    /// `Δx` and `Δn` used as given.
    Nominal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaSpec {
    Single(f64),
    /// `lo`, `hi`, number of log-spaced points.
    Grid(f64, f64, usize),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemberFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "Q", default)]
    q: Option<Vec<Vec<f64>>>,
}

/// Explicit ensemble description for `bounds`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleFile {
    members: Vec<MemberFile>,
    /// Bound on `‖δ(t)‖`.
    delta_x: f64,
    /// Bound on `‖n(t)‖`.
    delta_n: f64,
    #[serde(default)]
    tau: Option<usize>,
    #[serde(default)]
    sequence: Option<Vec<usize>>,
    #[serde(default)]
    rank_tolerance: Option<f64>,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> CliResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::config(format!("{what} has rows of different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Ensemble, τ, and the norm bounds Δx, Δn, read from either input kind.
pub struct BoundInputs {
    pub ensemble: SystemEnsemble,
    pub tau: usize,
    pub delta_x: f64,
    pub delta_n: f64,
    /// γ of the scenario, when the input was one.
    pub scenario_gamma: Option<f64>,
}

pub fn load_bound_inputs(path: &Path, mode: DeltaMode) -> CliResult<BoundInputs> {
    let text = read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if value.get("members").is_some() {
        let file: EnsembleFile = serde_json::from_value(value)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut members = Vec::with_capacity(file.members.len());
        for (i, m) in file.members.iter().enumerate() {
            let a = rows_to_matrix(&m.a, &format!("member {i} A"))?;
            let q = match &m.q {
                Some(q) => rows_to_matrix(q, &format!("member {i} Q"))?,
                None => DMatrix::identity(a.nrows(), a.nrows()),
            };
            members.push(EnsembleMember { a, q });
        }
        let ensemble = SystemEnsemble::with_rank_tolerance(
            members,
            file.rank_tolerance.unwrap_or(DEFAULT_RANK_TOLERANCE),
        )?;
        let tau = match (file.tau, &file.sequence) {
            (Some(t), _) => t,
            (None, Some(seq)) => observability_window(seq, &ensemble)?
                .ok_or_else(|| CliError::config("sequence never observes the full state"))?,
            (None, None) => {
                let l = ensemble.len();
                let round_robin: Vec<usize> = (0..2 * l).map(|i| i % l).collect();
                observability_window(&round_robin, &ensemble)?.ok_or_else(|| {
                    CliError::config("cycling through the members never observes the full state")
                })?
            }
        };
        Ok(BoundInputs {
            ensemble,
            tau,
            delta_x: file.delta_x,
            delta_n: file.delta_n,
            scenario_gamma: None,
        })
    } else {
        let sc: ScenarioConfig = serde_json::from_value(value)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        sc.validate()?;
        let exp = Experiment::new(sc.clone())?;
        let tau = observability_window(&exp.sequence_for(0)?, exp.ensemble())?.ok_or_else(|| {
            CliError::config("the scenario's sequence never observes the full state")
        })?;
        let (dx, dn) = match mode {
            DeltaMode::Nominal => (sc.delta_x, sc.noise.delta_n()),
            DeltaMode::Norm => (
                (sc.n_states as f64).sqrt() * sc.delta_x / 2.0,
                (sc.n_meas as f64).sqrt() * sc.noise.delta_n() / 2.0,
            ),
        };
        Ok(BoundInputs {
            ensemble: exp.ensemble().clone(),
            tau,
            delta_x: dx,
            delta_n: dn,
            scenario_gamma: Some(sc.gamma),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundsArgs {
    pub input: PathBuf,
    pub gamma: GammaSpec,
    pub out: PathBuf,
    /// JSON report destination; standard output when absent.
    pub report: Option<PathBuf>,
    pub delta_mode: DeltaMode,
}

pub fn run_bounds(args: &BoundsArgs) -> CliResult<()> {
    let inputs = load_bound_inputs(&args.input, args.delta_mode)?;
    let k = ensemble_constants(&inputs.ensemble)?;
    let (tau, dx, dn) = (inputs.tau, inputs.delta_x, inputs.delta_n);
    let grid = match args.gamma {
        GammaSpec::Single(g) => vec![g],
        GammaSpec::Grid(lo, hi, n) => log_grid(lo, hi, n)?,
    };
    let report_gamma = match args.gamma {
        GammaSpec::Single(g) => g,
        GammaSpec::Grid(..) => match inputs.scenario_gamma {
            Some(g) => g,
            None => {
                let star = gamma_star_bounded(k.c, k.lambda_bar, dn, dx)?;
                if star.at_boundary { grid[0] } else { star.gamma }
            }
        },
    };
    let mut w = create(&args.out)?;
    let io_err = |e| CliError::io(&args.out, e);
    writeln!(w, "gamma,h_b,h_s").map_err(io_err)?;
    for &g in &grid {
        let hb = h_bounded(g, tau, dx, k.c, dn, k.lambda_bar)?;
        let hs = h_stochastic(g, tau, k.capital_c, k.m, dx, k.lambda_bar)?;
        write_csv_row(&mut w, &format_float(g), &[hb, hs]).map_err(io_err)?;
    }
    finish(w, &args.out)?;

    let report = BoundReport::compute(&inputs.ensemble, tau, dx, dn, report_gamma, SEARCH_INTERVAL)?;
    let json = serde_json::to_string_pretty(&report).expect("plain data serializes");
    match &args.report {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}").map_err(|e| CliError::io(path, e))?;
            finish(w, path)
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Bounded,
    Stochastic,
}

#[derive(Debug, Clone)]
pub struct GammaStarArgs {
    pub config: PathBuf,
    pub noise: NoiseMode,
    pub delta_mode: DeltaMode,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct GammaStarOutput {
    pub noise: &'static str,
    pub gamma_star: f64,
    pub tau: usize,
    pub lambda_bar: f64,
    pub c: f64,
    pub capital_c: f64,
    pub m: f64,
    pub delta_x: f64,
    pub delta_n: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<ose_core::analysis::SearchMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unimodal: Option<bool>,
}

pub fn compute_gamma_star(args: &GammaStarArgs) -> CliResult<GammaStarOutput> {
    let inputs = load_bound_inputs(&args.config, args.delta_mode)?;
    let k = ensemble_constants(&inputs.ensemble)?;
    let mut out = GammaStarOutput {
        noise: "bounded",
        gamma_star: 0.0,
        tau: inputs.tau,
        lambda_bar: k.lambda_bar,
        c: k.c,
        capital_c: k.capital_c,
        m: k.m,
        delta_x: inputs.delta_x,
        delta_n: inputs.delta_n,
        method: None,
        unimodal: None,
    };
    match args.noise {
        NoiseMode::Bounded => {
            out.gamma_star = gamma_star_bounded(k.c, k.lambda_bar, inputs.delta_n, inputs.delta_x)?.gamma;
        }
        NoiseMode::Stochastic => {
            let s = gamma_star_stochastic(
                inputs.tau,
                k.capital_c,
                k.m,
                inputs.delta_x,
                k.lambda_bar,
                SEARCH_INTERVAL,
                1e-10,
            )?;
            out.noise = "stochastic";
            out.gamma_star = s.gamma;
            out.method = Some(s.method);
            out.unimodal = Some(s.unimodal);
        }
    }
    Ok(out)
}

pub fn run_gamma_star(args: &GammaStarArgs) -> CliResult<()> {
    let out = compute_gamma_star(args)?;
    let json = serde_json::to_string(&out).expect("plain data serializes");
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}").map_err(|e| CliError::io(path, e))?;
            finish(w, path)
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayArgs {
    pub input: PathBuf,
    pub gamma: f64,
    /// `x̂(0)`; zero of the batches' width when absent.
    pub x0: Option<Vec<f64>>,
    pub out: PathBuf,
}

/// Streams batches from a JSON-lines reader through the estimator into `out`.
///
/// Reads one line at a time. Each batch must carry `t` one greater than the
/// previous (the first is `t = 1`).
pub fn replay_stream<R: BufRead, W: Write>(
    reader: R,
    gamma: f64,
    x0: Option<Vec<f64>>,
    out: &mut W,
) -> CliResult<()> {
    let out_err = |e: io::Error| CliError { code: 4, message: format!("writing output: {e}") };
    let mut n_states = x0.as_ref().map(Vec::len);
    let mut state: Option<(EstimatorState, EstimatorConfig)> = None;
    let mut header_written = false;
    if let Some(n) = n_states {
        writeln!(out, "{}", estimate_header(n)).map_err(out_err)?;
        header_written = true;
    }
    for item in BatchReader::new(reader, n_states) {
        let (line, batch) = match item {
            Ok(v) => v,
            Err(ReadError::Io(e)) => return Err(CliError { code: 4, message: format!("reading input: {e}") }),
            Err(ReadError::Data(e)) => return Err(e.into()),
        };
        let at_line = |e: ose_core::Error| {
            let inner: CliError = e.into();
            CliError { code: inner.code, message: format!("line {line}: {}", inner.message) }
        };
        if state.is_none() {
            let n = batch.n_states();
            n_states.get_or_insert(n);
            let initial = match &x0 {
                Some(v) => EstimatorState::new(DVector::from_column_slice(v)).map_err(at_line)?,
                None => EstimatorState::zeros(n),
            };
            let cfg = EstimatorConfig::new(gamma, n).map_err(at_line)?;
            state = Some((initial, cfg));
            if !header_written {
                writeln!(out, "{}", estimate_header(n)).map_err(out_err)?;
                header_written = true;
            }
        }
        let (current, cfg) = state.as_mut().expect("initialized above");
        *current = update(current, &batch, cfg).map_err(at_line)?;
        write_estimate_row(out, current).map_err(out_err)?;
    }
    if !header_written {
        writeln!(out, "t").map_err(out_err)?;
    }
    Ok(())
}

pub fn run_replay(args: &ReplayArgs) -> CliResult<()> {
    if !(args.gamma.is_finite() && args.gamma > 0.0) {
        return Err(CliError::config(format!("gamma must be positive, got {}", args.gamma)));
    }
    let file = File::open(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let mut w = create(&args.out)?;
    replay_stream(BufReader::new(file), args.gamma, args.x0.clone(), &mut w)?;
    finish(w, &args.out)
}

/// Runs the invariant suite, printing one line per check. Returns whether all passed.
pub fn run_verify(config: Option<&Path>) -> CliResult<bool> {
    let base = match config {
        Some(p) => load_scenario(p)?,
        None => ScenarioConfig::reference_bounded(0.25, 50, 1, 0),
    };
    let report = run_invariant_suite(&base)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(report.all_passed())
}
