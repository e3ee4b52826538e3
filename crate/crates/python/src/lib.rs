//! Python bindings. Matrices cross the boundary as lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use ose_core::analysis::{self, EnsembleMember, SystemEnsemble};
use ose_core::estimator::{
    self, EstimatorConfig, EstimatorState, MeasurementBatch, OnlineEstimator,
    DEFAULT_RANK_TOLERANCE,
};
use ose_core::simulation::{self, ScenarioConfig};

fn to_py(e: ose_core::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn weight(q: Option<Vec<Vec<f64>>>, n_meas: usize) -> PyResult<DMatrix<f64>> {
    match q {
        Some(q) => matrix(&q),
        None => Ok(DMatrix::identity(n_meas, n_meas)),
    }
}

fn ensemble(members: Vec<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)>) -> PyResult<SystemEnsemble> {
    let members = members
        .into_iter()
        .map(|(a, q)| {
            let a = matrix(&a)?;
            let q = weight(q, a.nrows())?;
            Ok(EnsembleMember { a, q })
        })
        .collect::<PyResult<Vec<_>>>()?;
    SystemEnsemble::new(members).map_err(to_py)
}

/// Streaming estimator; `step` consumes one batch and returns the new estimate.
#[pyclass(module = "ose")]
struct Estimator {
    inner: OnlineEstimator,
}

#[pymethods]
impl Estimator {
    #[new]
    #[pyo3(signature = (gamma, n_states, x0=None))]
    fn new(gamma: f64, n_states: usize, x0: Option<Vec<f64>>) -> PyResult<Self> {
        let config = EstimatorConfig::new(gamma, n_states).map_err(to_py)?;
        let initial = match x0 {
            Some(x) => EstimatorState::new(DVector::from_vec(x)).map_err(to_py)?,
            None => EstimatorState::zeros(n_states),
        };
        let inner = OnlineEstimator::new(config, initial).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (y, a, q=None, b=None))]
    fn step(
        &mut self,
        y: Vec<f64>,
        a: Vec<Vec<f64>>,
        q: Option<Vec<Vec<f64>>>,
        b: Option<Vec<f64>>,
    ) -> PyResult<Vec<f64>> {
        let t = self.inner.state().t + 1;
        let a = matrix(&a)?;
        let q = weight(q, a.nrows())?;
        let batch = MeasurementBatch::new(t, DVector::from_vec(y), a, q, b.map(DVector::from_vec))
            .map_err(to_py)?;
        let state = self.inner.step(&batch).map_err(to_py)?;
        Ok(state.x_hat.iter().copied().collect())
    }

    #[getter]
    fn estimate(&self) -> Vec<f64> {
        self.inner.state().x_hat.iter().copied().collect()
    }

    #[getter]
    fn t(&self) -> u64 {
        self.inner.state().t
    }
}

#[pyfunction]
#[pyo3(signature = (a, gamma, q=None))]
fn lambda_matrix(a: Vec<Vec<f64>>, gamma: f64, q: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let a = matrix(&a)?;
    let q = weight(q, a.nrows())?;
    estimator::lambda_matrix(&a, &q, gamma).map(|l| rows(&l)).map_err(to_py)
}

/// Returns `(lambda_eigenvalues, nonzero_information_eigenvalues, kernel_dimension)`.
#[pyfunction]
#[pyo3(signature = (a, gamma, q=None))]
fn decompose_lambda(
    a: Vec<Vec<f64>>,
    gamma: f64,
    q: Option<Vec<Vec<f64>>>,
) -> PyResult<(Vec<f64>, Vec<f64>, usize)> {
    let a = matrix(&a)?;
    let q = weight(q, a.nrows())?;
    let dec = estimator::decompose_lambda(&a, &q, gamma, DEFAULT_RANK_TOLERANCE).map_err(to_py)?;
    Ok((dec.lambda_eigenvalues(), dec.nonzero_eigs.clone(), dec.kernel_basis.ncols()))
}

/// Members are `(A, Q)` pairs; `Q` may be `None` for the identity.
#[pyfunction]
fn psi(members: Vec<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)>, gamma: f64) -> PyResult<f64> {
    analysis::psi(&ensemble(members)?, gamma).map_err(to_py)
}

/// Returns `(lambda_bar, c, capital_c, m)`.
#[pyfunction]
fn ensemble_constants(
    members: Vec<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)>,
) -> PyResult<(f64, f64, f64, f64)> {
    let k = analysis::ensemble_constants(&ensemble(members)?).map_err(to_py)?;
    Ok((k.lambda_bar, k.c, k.capital_c, k.m))
}

#[pyfunction]
fn observability_window(
    members: Vec<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)>,
    sequence: Vec<usize>,
) -> PyResult<Option<usize>> {
    analysis::observability_window(&sequence, &ensemble(members)?).map_err(to_py)
}

#[pyfunction]
fn h_bounded(gamma: f64, tau: usize, delta_x: f64, c: f64, delta_n: f64, lambda_bar: f64) -> PyResult<f64> {
    analysis::h_bounded(gamma, tau, delta_x, c, delta_n, lambda_bar).map_err(to_py)
}

#[pyfunction]
fn h_stochastic(
    gamma: f64,
    tau: usize,
    capital_c: f64,
    m: f64,
    delta_x: f64,
    lambda_bar: f64,
) -> PyResult<f64> {
    analysis::h_stochastic(gamma, tau, capital_c, m, delta_x, lambda_bar).map_err(to_py)
}

#[pyfunction]
fn gamma_star_bounded(c: f64, lambda_bar: f64, delta_n: f64, delta_x: f64) -> PyResult<f64> {
    analysis::gamma_star_bounded(c, lambda_bar, delta_n, delta_x)
        .map(|g| g.gamma)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (tau, capital_c, m, delta_x, lambda_bar, lo=1e-4, hi=1e4, tolerance=1e-10))]
#[allow(clippy::too_many_arguments)]
fn gamma_star_stochastic(
    tau: usize,
    capital_c: f64,
    m: f64,
    delta_x: f64,
    lambda_bar: f64,
    lo: f64,
    hi: f64,
    tolerance: f64,
) -> PyResult<f64> {
    analysis::gamma_star_stochastic(tau, capital_c, m, delta_x, lambda_bar, (lo, hi), tolerance)
        .map(|g| g.gamma)
        .map_err(to_py)
}

/// `per_step` holds one `(delta_x, c, delta_n)` triple per step.
#[pyfunction]
fn bound_finite_bounded(
    horizon: usize,
    tau: usize,
    psi: f64,
    xi0_norm: f64,
    per_step: Vec<(f64, f64, f64)>,
    gamma: f64,
) -> PyResult<f64> {
    let steps: Vec<analysis::BoundedStep> = per_step
        .into_iter()
        .map(|(delta_x, c, delta_n)| analysis::BoundedStep { delta_x, c, delta_n })
        .collect();
    analysis::bound_finite_bounded(horizon, tau, psi, xi0_norm, &steps, gamma).map_err(to_py)
}

/// Runs the scenario described by a JSON config; returns `(mean_error, rms_error)`.
#[pyfunction]
fn monte_carlo(py: Python<'_>, config_json: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let scenario: ScenarioConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let summary = py
        .detach(|| simulation::monte_carlo(&scenario))
        .map_err(to_py)?;
    Ok((summary.mean_error, summary.rms_error))
}

/// Unit-Frobenius Gaussian library with identity weights; returns the `A` matrices.
#[pyfunction]
#[pyo3(signature = (n_states, n_meas, library_size, seed))]
fn generate_library(
    n_states: usize,
    n_meas: usize,
    library_size: usize,
    seed: u64,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let noise = simulation::NoiseModel::Bounded { delta_n: 1.0 };
    let lib = simulation::generate_library(n_states, n_meas, library_size, &noise, seed, DEFAULT_RANK_TOLERANCE)
        .map_err(to_py)?;
    Ok(lib.members().iter().map(|m| rows(&m.a)).collect())
}

#[pymodule]
fn ose(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Estimator>()?;
    m.add_function(wrap_pyfunction!(lambda_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(decompose_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(psi, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_constants, m)?)?;
    m.add_function(wrap_pyfunction!(observability_window, m)?)?;
    m.add_function(wrap_pyfunction!(h_bounded, m)?)?;
    m.add_function(wrap_pyfunction!(h_stochastic, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_star_bounded, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_star_stochastic, m)?)?;
    m.add_function(wrap_pyfunction!(bound_finite_bounded, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(generate_library, m)?)?;
    Ok(())
}
