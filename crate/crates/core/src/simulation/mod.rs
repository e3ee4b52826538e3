//! Seeded Monte Carlo harness: random measurement libraries, drifting states,
//! bounded or Gaussian noise, and the estimator run over all of it.

mod generate;
pub mod seed;

pub use generate::{
    generate_library, generate_noise, generate_sequence, generate_trajectory,
    generate_trajectory_from, GeneratedSequence, NoiseModel, SequencePolicy, Trajectory,
};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{bound_finite_bounded_trajectory, BoundedStep, SystemEnsemble};
use crate::estimator::{
    update, EstimatorConfig, EstimatorState, MeasurementBatch, DEFAULT_RANK_TOLERANCE,
};
use crate::linalg::{spectral_norm, WeightedModel};
use crate::{Error, Result};
use seed::{
    derive_seed, LIBRARY_STREAM, NOISE_STREAM, SEQUENCE_STREAM, SHARED_SEQUENCE_STREAM,
    TRAJECTORY_STREAM,
};

fn default_rank_tolerance() -> f64 {
    DEFAULT_RANK_TOLERANCE
}

/// Everything needed to reproduce an experiment. Read from JSON with these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_states: usize,
    pub n_meas: usize,
    pub horizon: usize,
    pub library_size: usize,
    /// Width of the per-coordinate uniform state variation `U(−Δx/2, Δx/2)`.
    pub delta_x: f64,
    pub noise: NoiseModel,
    pub gamma: f64,
    pub n_runs: usize,
    pub seed: u64,
    /// Defaults to `window_constrained` with window `⌈n_states / n_meas⌉`.
    #[serde(default)]
    pub sequence_policy: Option<SequencePolicy>,
    /// `x(0)`; drawn per coordinate from `U(−Δx/2, Δx/2)` when absent.
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    /// `x̂(0)`; zero when absent.
    #[serde(default)]
    pub initial_estimate: Option<Vec<f64>>,
    /// Draw the member sequence once and share it across runs.
    #[serde(default)]
    pub fixed_sequence: bool,
    /// Accumulate the empirical error covariance at every step.
    #[serde(default)]
    pub track_covariance: bool,
    #[serde(default = "default_rank_tolerance")]
    pub rank_tolerance: f64,
}

impl ScenarioConfig {
    /// Bounded-noise setup with N = 15, M = 3, a library of 10 and Δx = Δn = 1.
    pub fn reference_bounded(gamma: f64, horizon: usize, n_runs: usize, seed: u64) -> Self {
        Self {
            n_states: 15,
            n_meas: 3,
            horizon,
            library_size: 10,
            delta_x: 1.0,
            noise: NoiseModel::Bounded { delta_n: 1.0 },
            gamma,
            n_runs,
            seed,
            sequence_policy: None,
            initial_state: None,
            initial_estimate: None,
            fixed_sequence: false,
            track_covariance: false,
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
        }
    }

    /// Gaussian-noise counterpart with Δn = 0.25.
    pub fn reference_gaussian(gamma: f64, horizon: usize, n_runs: usize, seed: u64) -> Self {
        Self {
            noise: NoiseModel::Gaussian { delta_n: 0.25 },
            ..Self::reference_bounded(gamma, horizon, n_runs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_states", self.n_states),
            ("n_meas", self.n_meas),
            ("horizon", self.horizon),
            ("library_size", self.library_size),
            ("n_runs", self.n_runs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be at least 1")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.delta_x.is_finite() && self.delta_x >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "delta_x must be nonnegative, got {}",
                self.delta_x
            )));
        }
        self.noise.validate()?;
        if !(self.rank_tolerance.is_finite() && self.rank_tolerance > 0.0) {
            return Err(Error::InvalidParameter("rank_tolerance must be positive".into()));
        }
        for (name, v) in [
            ("initial_state", &self.initial_state),
            ("initial_estimate", &self.initial_estimate),
        ] {
            if let Some(v) = v {
                if v.len() != self.n_states {
                    return Err(Error::Dimension(format!(
                        "{name} has {} entries, expected {}",
                        v.len(),
                        self.n_states
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn resolved_policy(&self) -> SequencePolicy {
        self.sequence_policy
            .unwrap_or(SequencePolicy::WindowConstrained {
                window: self.n_states.div_ceil(self.n_meas),
            })
    }

    pub fn library_seed(&self) -> u64 {
        derive_seed(self.seed, LIBRARY_STREAM)
    }

    pub fn run_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }
}

/// Outcome of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed_used: u64,
    pub sequence: Vec<usize>,
    /// `‖ξ(t)‖` for `t = 1..=T`.
    pub per_step_error: Vec<f64>,
    /// `ξ(t)` for `t = 1..=T`.
    pub errors: Vec<DVector<f64>>,
    pub xi0: DVector<f64>,
    /// Realized `‖δ(t)‖`.
    pub delta_norms: Vec<f64>,
    /// Realized `‖n(t)‖`.
    pub noise_norms: Vec<f64>,
    /// `‖A(t)ᵀQ_t⁻¹‖₂` of the member used at each step.
    pub c_per_step: Vec<f64>,
    pub final_state: DVector<f64>,
    pub final_estimate: DVector<f64>,
}

impl RunResult {
    /// Bounded-noise finite-horizon bound at every step, fed with the realized
    /// `‖δ(t)‖` and `‖n(t)‖`.
    pub fn bounded_bound_trajectory(&self, tau: usize, psi: f64, gamma: f64) -> Result<Vec<f64>> {
        let steps: Vec<BoundedStep> = self
            .delta_norms
            .iter()
            .zip(&self.noise_norms)
            .zip(&self.c_per_step)
            .map(|((&dx, &dn), &c)| BoundedStep {
                delta_x: dx,
                c,
                delta_n: dn,
            })
            .collect();
        bound_finite_bounded_trajectory(tau, psi, self.xi0.norm(), &steps, gamma)
    }
}

/// Full record of one run, for dumps and replay.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub batches: Vec<MeasurementBatch>,
    pub deltas: Vec<DVector<f64>>,
    pub noises: Vec<DVector<f64>>,
    /// `x(0..=T)`.
    pub states: Vec<DVector<f64>>,
    /// `x̂(0..=T)`.
    pub estimates: Vec<DVector<f64>>,
}

/// Run-averaged error statistics per step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    /// Run average of `‖ξ(t)‖`.
    pub mean_error: Vec<f64>,
    /// `√(run average of ‖ξ(t)‖²)`.
    pub rms_error: Vec<f64>,
    /// `‖Σ̂(t)‖_F` of the unbiased sample covariance, when tracked.
    pub empirical_cov_frob: Option<Vec<f64>>,
    #[serde(skip)]
    pub empirical_cov: Option<Vec<DMatrix<f64>>>,
    #[serde(skip)]
    pub empirical_mean: Option<Vec<DVector<f64>>>,
    pub n_runs: usize,
}

impl McSummary {
    /// Average of `mean_error` over steps `from..` (0-based).
    pub fn steady_state_mean(&self, from: usize) -> f64 {
        tail_mean(&self.mean_error, from)
    }

    pub fn steady_state_rms(&self, from: usize) -> f64 {
        tail_mean(&self.rms_error, from)
    }
}

fn tail_mean(v: &[f64], from: usize) -> f64 {
    let tail = &v[from.min(v.len())..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// A scenario bound to its generated library (and shared sequence, if any).
#[derive(Debug, Clone)]
pub struct Experiment {
    scenario: ScenarioConfig,
    ensemble: SystemEnsemble,
    shared_sequence: Option<Vec<usize>>,
    config: EstimatorConfig,
    member_c: Vec<f64>,
}

const CHUNK: usize = 64;

impl Experiment {
    pub fn new(scenario: ScenarioConfig) -> Result<Self> {
        scenario.validate()?;
        let ensemble = generate_library(
            scenario.n_states,
            scenario.n_meas,
            scenario.library_size,
            &scenario.noise,
            scenario.library_seed(),
            scenario.rank_tolerance,
        )?;
        Self::with_ensemble(scenario, ensemble)
    }

    /// Uses a caller-supplied library instead of generating one.
    pub fn with_ensemble(scenario: ScenarioConfig, ensemble: SystemEnsemble) -> Result<Self> {
        scenario.validate()?;
        if ensemble.n_states() != scenario.n_states {
            return Err(Error::Dimension(format!(
                "ensemble has {} states, scenario {}",
                ensemble.n_states(),
                scenario.n_states
            )));
        }
        let config = EstimatorConfig::with_rank_tolerance(
            scenario.gamma,
            scenario.n_states,
            scenario.rank_tolerance,
        )?;
        let member_c = ensemble
            .members()
            .iter()
            .map(|m| Ok(spectral_norm(&WeightedModel::new(&m.a, &m.q)?.weighted_t)))
            .collect::<Result<Vec<_>>>()?;
        let shared_sequence = if scenario.fixed_sequence {
            Some(
                generate_sequence(
                    &ensemble,
                    scenario.horizon,
                    scenario.resolved_policy(),
                    derive_seed(scenario.seed, SHARED_SEQUENCE_STREAM),
                )?
                .indices,
            )
        } else {
            None
        };
        Ok(Self {
            scenario,
            ensemble,
            shared_sequence,
            config,
            member_c,
        })
    }

    /// Same library, runs and seeds with a different inertia parameter.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut next = self.clone();
        next.scenario.gamma = gamma;
        next.config = EstimatorConfig::with_rank_tolerance(
            gamma,
            self.scenario.n_states,
            self.scenario.rank_tolerance,
        )?;
        Ok(next)
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn ensemble(&self) -> &SystemEnsemble {
        &self.ensemble
    }

    pub fn estimator_config(&self) -> &EstimatorConfig {
        &self.config
    }

    /// Member sequence used by run `index`.
    pub fn sequence_for(&self, index: usize) -> Result<Vec<usize>> {
        self.sequence_for_seed(self.scenario.run_seed(index))
    }

    fn sequence_for_seed(&self, run_seed: u64) -> Result<Vec<usize>> {
        match &self.shared_sequence {
            Some(seq) => Ok(seq.clone()),
            None => Ok(generate_sequence(
                &self.ensemble,
                self.scenario.horizon,
                self.scenario.resolved_policy(),
                derive_seed(run_seed, SEQUENCE_STREAM),
            )?
            .indices),
        }
    }

    pub fn run(&self, index: usize) -> Result<RunResult> {
        Ok(self.execute(self.scenario.run_seed(index), false)?.0)
    }

    pub fn run_with_seed(&self, run_seed: u64) -> Result<RunResult> {
        Ok(self.execute(run_seed, false)?.0)
    }

    /// Run `index` together with every batch, state and estimate.
    pub fn trace(&self, index: usize) -> Result<(RunResult, RunTrace)> {
        let (result, trace) = self.execute(self.scenario.run_seed(index), true)?;
        Ok((result, trace.expect("trace requested")))
    }

    fn execute(&self, run_seed: u64, keep_trace: bool) -> Result<(RunResult, Option<RunTrace>)> {
        let sc = &self.scenario;
        let sequence = self.sequence_for_seed(run_seed)?;
        let traj_seed = derive_seed(run_seed, TRAJECTORY_STREAM);
        let traj = match &sc.initial_state {
            Some(x0) => generate_trajectory_from(
                DVector::from_column_slice(x0),
                sc.horizon,
                sc.delta_x,
                traj_seed,
            )?,
            None => generate_trajectory(sc.n_states, sc.horizon, sc.delta_x, traj_seed)?,
        };
        let noises = generate_noise(
            &sc.noise,
            sc.n_meas,
            sc.horizon,
            derive_seed(run_seed, NOISE_STREAM),
        )?;

        let x_hat0 = match &sc.initial_estimate {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(sc.n_states),
        };
        let xi0 = &x_hat0 - &traj.states[0];
        let mut state = EstimatorState::new(x_hat0)?;

        let horizon = sc.horizon;
        let mut per_step_error = Vec::with_capacity(horizon);
        let mut errors = Vec::with_capacity(horizon);
        let mut c_per_step = Vec::with_capacity(horizon);
        let mut batches = Vec::new();
        let mut estimates = Vec::new();
        if keep_trace {
            estimates.push(state.x_hat.clone());
        }

        for t in 1..=horizon {
            let member = &self.ensemble.members()[sequence[t - 1]];
            let x = &traj.states[t];
            let y = &member.a * x + &noises[t - 1];
            let batch = MeasurementBatch {
                t: t as u64,
                y,
                a: member.a.clone(),
                q: member.q.clone(),
                b: None,
            };
            state = update(&state, &batch, &self.config).map_err(|e| Error::AtStep {
                step: t as u64,
                source: Box::new(e),
            })?;
            let xi = &state.x_hat - x;
            per_step_error.push(xi.norm());
            errors.push(xi);
            c_per_step.push(self.member_c[sequence[t - 1]]);
            if keep_trace {
                batches.push(batch);
                estimates.push(state.x_hat.clone());
            }
        }

        let result = RunResult {
            seed_used: run_seed,
            sequence,
            per_step_error,
            errors,
            xi0,
            delta_norms: traj.deltas.iter().map(|d| d.norm()).collect(),
            noise_norms: noises.iter().map(|n| n.norm()).collect(),
            c_per_step,
            final_state: traj.states[horizon].clone(),
            final_estimate: state.x_hat.clone(),
        };
        let trace = keep_trace.then(|| RunTrace {
            batches,
            deltas: traj.deltas,
            noises,
            states: traj.states,
            estimates,
        });
        Ok((result, trace))
    }

    /// Aggregates `n_runs` runs. Runs execute in parallel; accumulation happens
    /// in run-index order so the output is independent of the thread count.
    pub fn monte_carlo(&self) -> Result<McSummary> {
        let sc = &self.scenario;
        let (horizon, n) = (sc.horizon, sc.n_states);
        let mut sum = vec![0.0; horizon];
        let mut sum_sq = vec![0.0; horizon];
        let mut sum_xi = sc
            .track_covariance
            .then(|| vec![DVector::<f64>::zeros(n); horizon]);
        let mut sum_outer = sc
            .track_covariance
            .then(|| vec![DMatrix::<f64>::zeros(n, n); horizon]);

        let mut start = 0;
        while start < sc.n_runs {
            let end = (start + CHUNK).min(sc.n_runs);
            let chunk: Vec<RunResult> = (start..end)
                .into_par_iter()
                .map(|i| self.run(i))
                .collect::<Result<_>>()?;
            for run in &chunk {
                for (t, &e) in run.per_step_error.iter().enumerate() {
                    sum[t] += e;
                    sum_sq[t] += e * e;
                }
                if let (Some(sx), Some(so)) = (sum_xi.as_mut(), sum_outer.as_mut()) {
                    for (t, xi) in run.errors.iter().enumerate() {
                        sx[t] += xi;
                        so[t].ger(1.0, xi, xi, 1.0);
                    }
                }
            }
            start = end;
        }

        let runs = sc.n_runs as f64;
        let mean_error = sum.iter().map(|s| s / runs).collect();
        let rms_error = sum_sq.iter().map(|s| (s / runs).sqrt()).collect();
        let (empirical_mean, empirical_cov) = match (sum_xi, sum_outer) {
            (Some(sx), Some(so)) => {
                let means: Vec<DVector<f64>> = sx.into_iter().map(|s| s / runs).collect();
                let covs = so
                    .into_iter()
                    .zip(&means)
                    .map(|(outer, mu)| {
                        if sc.n_runs < 2 {
                            DMatrix::zeros(n, n)
                        } else {
                            (outer - mu * mu.transpose() * runs) / (runs - 1.0)
                        }
                    })
                    .collect::<Vec<_>>();
                (Some(means), Some(covs))
            }
            _ => (None, None),
        };
        Ok(McSummary {
            mean_error,
            rms_error,
            empirical_cov_frob: empirical_cov
                .as_ref()
                .map(|c| c.iter().map(|m| m.norm()).collect()),
            empirical_cov,
            empirical_mean,
            n_runs: sc.n_runs,
        })
    }
}

/// Runs a single simulation of `scenario` with the given run seed.
pub fn simulate_run(scenario: &ScenarioConfig, run_seed: u64) -> Result<RunResult> {
    Experiment::new(scenario.clone())?.run_with_seed(run_seed)
}

pub fn monte_carlo(scenario: &ScenarioConfig) -> Result<McSummary> {
    Experiment::new(scenario.clone())?.monte_carlo()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            n_states: 4,
            n_meas: 2,
            horizon: 25,
            library_size: 5,
            delta_x: 0.5,
            noise: NoiseModel::Bounded { delta_n: 0.2 },
            gamma: 0.5,
            n_runs: 6,
            seed,
            sequence_policy: None,
            initial_state: None,
            initial_estimate: None,
            fixed_sequence: false,
            track_covariance: false,
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
        }
    }

    #[test]
    fn noiseless_still_start_stays_exact() {
        let sc = ScenarioConfig {
            delta_x: 0.0,
            noise: NoiseModel::Bounded { delta_n: 0.0 },
            ..small(1)
        };
        let run = simulate_run(&sc, 99).unwrap();
        assert!(run.per_step_error.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn runs_are_reproducible() {
        let exp = Experiment::new(small(5)).unwrap();
        assert_eq!(exp.run(2).unwrap(), exp.run(2).unwrap());
        assert_ne!(exp.run(2).unwrap(), exp.run(3).unwrap());
        assert_eq!(exp.run(2).unwrap().seed_used, small(5).run_seed(2));
    }

    #[test]
    fn single_run_summary_is_the_run() {
        let sc = ScenarioConfig {
            n_runs: 1,
            ..small(3)
        };
        let exp = Experiment::new(sc).unwrap();
        let summary = exp.monte_carlo().unwrap();
        assert_eq!(summary.mean_error, exp.run(0).unwrap().per_step_error);
    }

    #[test]
    fn prefix_runs_unchanged_when_adding_runs() {
        let a = Experiment::new(small(8)).unwrap();
        let b = Experiment::new(ScenarioConfig {
            n_runs: 12,
            ..small(8)
        })
        .unwrap();
        for i in 0..6 {
            assert_eq!(a.run(i).unwrap(), b.run(i).unwrap());
        }
    }

    #[test]
    fn trace_matches_result() {
        let exp = Experiment::new(small(2)).unwrap();
        let (result, trace) = exp.trace(1).unwrap();
        assert_eq!(result, exp.run(1).unwrap());
        assert_eq!(trace.batches.len(), 25);
        assert_eq!(trace.estimates.last().unwrap(), &result.final_estimate);
        for (t, xi) in result.errors.iter().enumerate() {
            assert_eq!(*xi, &trace.estimates[t + 1] - &trace.states[t + 1]);
        }
    }

    #[test]
    fn with_gamma_keeps_seeds() {
        let exp = Experiment::new(small(4)).unwrap();
        let other = exp.with_gamma(2.0).unwrap();
        let (a, b) = (exp.run(0).unwrap(), other.run(0).unwrap());
        assert_eq!(a.sequence, b.sequence);
        assert_eq!(a.delta_norms, b.delta_norms);
        assert_eq!(a.noise_norms, b.noise_norms);
        assert_ne!(a.per_step_error, b.per_step_error);
    }

    #[test]
    fn fixed_sequence_is_shared() {
        let exp = Experiment::new(ScenarioConfig {
            fixed_sequence: true,
            ..small(4)
        })
        .unwrap();
        assert_eq!(exp.sequence_for(0).unwrap(), exp.sequence_for(5).unwrap());
    }

    #[test]
    fn validation_errors() {
        let bad = ScenarioConfig { gamma: 0.0, ..small(1) };
        assert!(Experiment::new(bad).is_err());
        let bad = ScenarioConfig {
            initial_state: Some(vec![1.0]),
            ..small(1)
        };
        assert!(matches!(Experiment::new(bad), Err(Error::Dimension(_))));
        let bad = ScenarioConfig {
            sequence_policy: Some(SequencePolicy::WindowConstrained { window: 1 }),
            ..small(1)
        };
        assert!(matches!(Experiment::new(bad).and_then(|e| e.run(0)), Err(Error::Infeasible(_))));
    }

    #[test]
    fn scenario_json_uses_field_names() {
        let text = r#"{
            "n_states": 4, "n_meas": 2, "horizon": 10, "library_size": 5,
            "delta_x": 1.0, "noise": {"kind": "gaussian", "delta_n": 0.25},
            "gamma": 0.4, "n_runs": 3, "seed": 7,
            "sequence_policy": {"kind": "window_constrained", "window": 2}
        }"#;
        let sc: ScenarioConfig = serde_json::from_str(text).unwrap();
        assert_eq!(sc.noise, NoiseModel::Gaussian { delta_n: 0.25 });
        assert_eq!(sc.resolved_policy(), SequencePolicy::WindowConstrained { window: 2 });
        assert_eq!(sc.rank_tolerance, DEFAULT_RANK_TOLERANCE);

        let missing = r#"{"n_states": 4}"#;
        let err = serde_json::from_str::<ScenarioConfig>(missing).unwrap_err();
        assert!(err.to_string().contains("n_meas"));
    }
}
