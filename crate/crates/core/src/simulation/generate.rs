use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::seed::rng_from_seed;
use crate::analysis::{EnsembleMember, SystemEnsemble};
use crate::{Error, Result};

/// Measurement noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// Per-coordinate `U(−Δn/2, Δn/2)`, weighted with `Q = I`.
    Bounded { delta_n: f64 },
    /// `N(0, Δn I)`, weighted with `Q = Δn I`.
    Gaussian { delta_n: f64 },
}

impl NoiseModel {
    pub fn delta_n(&self) -> f64 {
        match *self {
            NoiseModel::Bounded { delta_n } | NoiseModel::Gaussian { delta_n } => delta_n,
        }
    }

    /// Weight matrix used by the estimator for this noise model.
    pub fn weight_matrix(&self, n_meas: usize) -> DMatrix<f64> {
        match *self {
            // Δn = 0 would make Q singular; fall back to the identity
            NoiseModel::Gaussian { delta_n } if delta_n > 0.0 => {
                DMatrix::identity(n_meas, n_meas) * delta_n
            }
            _ => DMatrix::identity(n_meas, n_meas),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let d = self.delta_n();
        if d.is_finite() && d >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "noise.delta_n must be nonnegative, got {d}"
            )))
        }
    }
}

/// How member indices are drawn for each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SequencePolicy {
    /// Independent uniform draws with replacement.
    Uniform,
    /// No index repeats inside any `window` consecutive steps, and every such
    /// window stacks to a full-column-rank matrix.
    WindowConstrained { window: usize },
}

/// Library of `library_size` standard-normal `n_meas × n_states` matrices, each
/// scaled to unit Frobenius norm, paired with the noise model's weight matrix.
///
/// Entries are drawn in column-major order, one matrix after another.
pub fn generate_library(
    n_states: usize,
    n_meas: usize,
    library_size: usize,
    noise: &NoiseModel,
    seed: u64,
    rank_tolerance: f64,
) -> Result<SystemEnsemble> {
    if n_states == 0 || n_meas == 0 || library_size == 0 {
        return Err(Error::InvalidParameter(
            "n_states, n_meas and library_size must be at least 1".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let q = noise.weight_matrix(n_meas);
    let members = (0..library_size)
        .map(|_| {
            let a = DMatrix::from_fn(n_meas, n_states, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = a.norm();
            EnsembleMember {
                a: a / norm,
                q: q.clone(),
            }
        })
        .collect();
    SystemEnsemble::with_rank_tolerance(members, rank_tolerance)
}

/// Output of [`generate_sequence`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedSequence {
    pub indices: Vec<usize>,
    /// Upper bound on the observability window guaranteed by the policy, if any.
    pub window_bound: Option<usize>,
}

const MAX_RESTARTS: usize = 1000;

pub fn generate_sequence(
    ensemble: &SystemEnsemble,
    horizon: usize,
    policy: SequencePolicy,
    seed: u64,
) -> Result<GeneratedSequence> {
    let mut rng = rng_from_seed(seed);
    let size = ensemble.len();
    match policy {
        SequencePolicy::Uniform => Ok(GeneratedSequence {
            indices: (0..horizon).map(|_| rng.random_range(0..size)).collect(),
            window_bound: None,
        }),
        SequencePolicy::WindowConstrained { window } => {
            check_window_feasible(ensemble, window)?;
            let mut cache: HashMap<Vec<usize>, bool> = HashMap::new();
            for _ in 0..MAX_RESTARTS {
                if let Some(indices) =
                    try_window_constrained(ensemble, horizon, window, &mut rng, &mut cache)?
                {
                    return Ok(GeneratedSequence {
                        indices,
                        window_bound: (horizon >= window).then_some(window),
                    });
                }
            }
            Err(Error::Infeasible(format!(
                "no full-rank window of {window} found after {MAX_RESTARTS} restarts"
            )))
        }
    }
}

fn check_window_feasible(ensemble: &SystemEnsemble, window: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::InvalidParameter("window must be at least 1".into()));
    }
    let max_rows = ensemble.members().iter().map(|m| m.a.nrows()).max().unwrap_or(0);
    if window * max_rows < ensemble.n_states() {
        return Err(Error::Infeasible(format!(
            "window {window} x {max_rows} measurements cannot observe {} states",
            ensemble.n_states()
        )));
    }
    if window > ensemble.len() {
        return Err(Error::Infeasible(format!(
            "window {window} needs at least {window} distinct members, library has {}",
            ensemble.len()
        )));
    }
    Ok(())
}

fn try_window_constrained<R: Rng>(
    ensemble: &SystemEnsemble,
    horizon: usize,
    window: usize,
    rng: &mut R,
    cache: &mut HashMap<Vec<usize>, bool>,
) -> Result<Option<Vec<usize>>> {
    let mut seq: Vec<usize> = Vec::with_capacity(horizon);
    let mut candidates: Vec<usize> = Vec::with_capacity(ensemble.len());
    for t in 0..horizon {
        let recent = &seq[t.saturating_sub(window - 1)..t];
        candidates.clear();
        candidates.extend((0..ensemble.len()).filter(|i| !recent.contains(i)));
        candidates.shuffle(rng);
        let mut chosen = None;
        for &c in &candidates {
            if t + 1 >= window {
                let mut key: Vec<usize> = recent.to_vec();
                key.push(c);
                key.sort_unstable();
                let ok = match cache.get(&key) {
                    Some(&hit) => hit,
                    None => {
                        let ok = ensemble.stack_is_full_rank(&key)?;
                        cache.insert(key, ok);
                        ok
                    }
                };
                if !ok {
                    continue;
                }
            }
            chosen = Some(c);
            break;
        }
        match chosen {
            Some(c) => seq.push(c),
            None => return Ok(None),
        }
    }
    Ok(Some(seq))
}

/// True states `x(0..=T)` and the variations `δ(1..=T)` that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub deltas: Vec<DVector<f64>>,
}

fn uniform_vector<R: Rng>(rng: &mut R, len: usize, width: f64) -> DVector<f64> {
    let half = width / 2.0;
    if half == 0.0 {
        return DVector::zeros(len);
    }
    DVector::from_fn(len, |_, _| rng.random_range(-half..=half))
}

fn check_nonnegative(v: f64, what: &str) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be nonnegative, got {v}")))
    }
}

/// Random walk with per-coordinate `U(−Δx/2, Δx/2)` steps; `x(0)` is drawn from
/// the same distribution.
pub fn generate_trajectory(
    n_states: usize,
    horizon: usize,
    delta_x: f64,
    seed: u64,
) -> Result<Trajectory> {
    check_nonnegative(delta_x, "delta_x")?;
    let mut rng = rng_from_seed(seed);
    let x0 = uniform_vector(&mut rng, n_states, delta_x);
    Ok(walk(x0, horizon, delta_x, &mut rng))
}

/// Like [`generate_trajectory`] but starting from a given `x(0)`.
pub fn generate_trajectory_from(
    x0: DVector<f64>,
    horizon: usize,
    delta_x: f64,
    seed: u64,
) -> Result<Trajectory> {
    check_nonnegative(delta_x, "delta_x")?;
    let mut rng = rng_from_seed(seed);
    Ok(walk(x0, horizon, delta_x, &mut rng))
}

fn walk<R: Rng>(x0: DVector<f64>, horizon: usize, delta_x: f64, rng: &mut R) -> Trajectory {
    let n = x0.len();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut deltas = Vec::with_capacity(horizon);
    states.push(x0);
    for _ in 0..horizon {
        let d = uniform_vector(rng, n, delta_x);
        let next = states.last().expect("non-empty") + &d;
        states.push(next);
        deltas.push(d);
    }
    Trajectory { states, deltas }
}

/// Noise vectors `n(1..=T)`.
pub fn generate_noise(
    model: &NoiseModel,
    n_meas: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    model.validate()?;
    let mut rng = rng_from_seed(seed);
    Ok(match *model {
        NoiseModel::Bounded { delta_n } => (0..horizon)
            .map(|_| uniform_vector(&mut rng, n_meas, delta_n))
            .collect(),
        NoiseModel::Gaussian { delta_n } => {
            if delta_n == 0.0 {
                vec![DVector::zeros(n_meas); horizon]
            } else {
                let normal = Normal::new(0.0, delta_n.sqrt())
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                (0..horizon)
                    .map(|_| DVector::from_fn(n_meas, |_, _| rng.sample(normal)))
                    .collect()
            }
        }
    })
}
