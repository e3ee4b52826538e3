//! Recursive online estimator.
//!
//! Each step solves the strongly convex problem
//!
//! ```text
//! x̂(t) = argmin_w (ỹ − A w)ᵀ Q⁻¹ (ỹ − A w) + γ ‖w − x̂(t−1)‖²
//! ```
//!
//! whose minimizer is `x̂(t) = Λ x̂(t−1) + (1/γ) Λ AᵀQ⁻¹ ỹ` with
//! `Λ = γ (AᵀQ⁻¹A + γI)⁻¹` and `ỹ = y − b` when an affine offset is present.
//! The production path ([`update`]) never forms `Λ`; it factors
//! `AᵀQ⁻¹A + γI` once and solves.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{check_finite_matrix, check_finite_vector, symmetrize, WeightedModel};
use crate::{Error, Result};

/// Default relative cut-off below which singular values count as zero.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

/// One time step's stacked observation `y = A x + b + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch {
    pub t: u64,
    pub y: DVector<f64>,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub b: Option<DVector<f64>>,
}

impl MeasurementBatch {
    /// Builds a batch after checking that `y`, `A`, `Q` and `b` agree in size.
    ///
    /// Positive definiteness of `Q` is checked lazily by the first factorization.
    pub fn new(
        t: u64,
        y: DVector<f64>,
        a: DMatrix<f64>,
        q: DMatrix<f64>,
        b: Option<DVector<f64>>,
    ) -> Result<Self> {
        let m = a.nrows();
        if y.len() != m {
            return Err(Error::Dimension(format!(
                "y has length {} but A has {m} rows",
                y.len()
            )));
        }
        if q.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "Q must be {m}x{m}, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        if let Some(b) = &b {
            if b.len() != m {
                return Err(Error::Dimension(format!(
                    "b has length {} but A has {m} rows",
                    b.len()
                )));
            }
            check_finite_vector(b, "b")?;
        }
        check_finite_vector(&y, "y")?;
        check_finite_matrix(&a, "A")?;
        check_finite_matrix(&q, "Q")?;
        Ok(Self { t, y, a, q, b })
    }

    /// Batch with identity weight `Q = I` and no offset.
    pub fn unweighted(t: u64, y: DVector<f64>, a: DMatrix<f64>) -> Result<Self> {
        let m = a.nrows();
        Self::new(t, y, a, DMatrix::identity(m, m), None)
    }

    /// A step in which nobody reported: `M_t = 0`.
    pub fn empty(t: u64, n_states: usize) -> Self {
        Self {
            t,
            y: DVector::zeros(0),
            a: DMatrix::zeros(0, n_states),
            q: DMatrix::zeros(0, 0),
            b: None,
        }
    }

    pub fn n_meas(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.a.ncols()
    }

    /// `ỹ = y − b`, or `y` when there is no offset.
    pub fn effective_y(&self) -> DVector<f64> {
        match &self.b {
            Some(b) => &self.y - b,
            None => self.y.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    /// Inertia parameter γ: weight of the pull toward the previous estimate.
    pub gamma: f64,
    pub n_states: usize,
    pub rank_tolerance: f64,
}

impl EstimatorConfig {
    pub fn new(gamma: f64, n_states: usize) -> Result<Self> {
        Self::with_rank_tolerance(gamma, n_states, DEFAULT_RANK_TOLERANCE)
    }

    pub fn with_rank_tolerance(gamma: f64, n_states: usize, rank_tolerance: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be positive and finite, got {gamma}"
            )));
        }
        if n_states == 0 {
            return Err(Error::InvalidParameter("n_states must be at least 1".into()));
        }
        if !(rank_tolerance.is_finite() && rank_tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "rank_tolerance must be positive, got {rank_tolerance}"
            )));
        }
        Ok(Self {
            gamma,
            n_states,
            rank_tolerance,
        })
    }
}

/// Current estimate `x̂(t)` and the index of the last batch folded into it.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub x_hat: DVector<f64>,
    pub t: u64,
}

impl EstimatorState {
    /// Start from `x̂(0) = 0`.
    pub fn zeros(n_states: usize) -> Self {
        Self {
            x_hat: DVector::zeros(n_states),
            t: 0,
        }
    }

    pub fn new(x_hat: DVector<f64>) -> Result<Self> {
        check_finite_vector(&x_hat, "x_hat")?;
        Ok(Self { x_hat, t: 0 })
    }
}

/// Spectral picture of `Λ(t)` built from the eigendecomposition of `J(t) = AᵀQ⁻¹A`.
#[derive(Debug, Clone)]
pub struct LambdaDecomposition {
    pub lambda_matrix: DMatrix<f64>,
    /// Nonzero eigenvalues of `J`, ascending.
    pub nonzero_eigs: Vec<f64>,
    /// Orthonormal basis of `ker J = ker A` (N × K).
    pub kernel_basis: DMatrix<f64>,
    /// Eigenvectors of `J` matching `nonzero_eigs` (N × I).
    pub image_basis: DMatrix<f64>,
    pub gamma: f64,
}

impl LambdaDecomposition {
    /// Eigenvalues of `Λ`: `γ/(γ+λ_i)` for each nonzero `λ_i`, then `1` repeated `K` times.
    pub fn lambda_eigenvalues(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .nonzero_eigs
            .iter()
            .map(|l| self.gamma / (self.gamma + l))
            .collect();
        out.extend(std::iter::repeat_n(1.0, self.kernel_basis.ncols()));
        out
    }

    /// `U diag(γ/(γ+λ_i)) Uᵀ + V Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.lambda_matrix.nrows();
        let mut out = &self.kernel_basis * self.kernel_basis.transpose();
        if out.is_empty() {
            out = DMatrix::zeros(n, n);
        }
        for (i, l) in self.nonzero_eigs.iter().enumerate() {
            let u = self.image_basis.column(i);
            out += (self.gamma / (self.gamma + l)) * u * u.transpose();
        }
        out
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "gamma must be positive and finite, got {gamma}"
        )))
    }
}

fn shifted_information(info: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let mut h = info.clone();
    for i in 0..h.nrows() {
        h[(i, i)] += gamma;
    }
    h
}

/// `Λ = γ (AᵀQ⁻¹A + γI)⁻¹`.
pub fn lambda_matrix(a: &DMatrix<f64>, q: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    check_gamma(gamma)?;
    let model = WeightedModel::new(a, q)?;
    let h = shifted_information(&model.info, gamma);
    let mut lambda = h
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("AᵀQ⁻¹A + γI".into()))?
        .inverse()
        * gamma;
    symmetrize(&mut lambda);
    Ok(lambda)
}

pub fn decompose_lambda(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    gamma: f64,
    rank_tolerance: f64,
) -> Result<LambdaDecomposition> {
    check_gamma(gamma)?;
    let model = WeightedModel::new(a, q)?;
    let n = a.ncols();
    let lambda = lambda_matrix(a, q, gamma)?;

    let eig = model.info.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rank_tolerance * top;
    let mut image: Vec<(f64, usize)> = Vec::new();
    let mut kernel: Vec<usize> = Vec::new();
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if top > 0.0 && l > cutoff {
            image.push((l, i));
        } else {
            kernel.push(i);
        }
    }
    image.sort_by(|x, y| x.0.total_cmp(&y.0));

    let column = |i: usize| eig.eigenvectors.column(i).into_owned();
    let image_basis = if image.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&image.iter().map(|&(_, i)| column(i)).collect::<Vec<_>>())
    };
    let kernel_basis = if kernel.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&kernel.iter().map(|&i| column(i)).collect::<Vec<_>>())
    };

    Ok(LambdaDecomposition {
        lambda_matrix: lambda,
        nonzero_eigs: image.iter().map(|&(l, _)| l).collect(),
        kernel_basis,
        image_basis,
        gamma,
    })
}

fn check_step(
    state: &EstimatorState,
    batch: &MeasurementBatch,
    config: &EstimatorConfig,
) -> Result<()> {
    if batch.t != state.t + 1 {
        return Err(Error::NonSequential {
            expected: state.t + 1,
            got: batch.t,
        });
    }
    if state.x_hat.len() != config.n_states {
        return Err(Error::Dimension(format!(
            "state has {} entries, config expects {}",
            state.x_hat.len(),
            config.n_states
        )));
    }
    if batch.n_states() != config.n_states {
        return Err(Error::Dimension(format!(
            "A has {} columns, config expects {}",
            batch.n_states(),
            config.n_states
        )));
    }
    Ok(())
}

fn finish(x_hat: DVector<f64>, t: u64) -> Result<EstimatorState> {
    if x_hat.iter().all(|v| v.is_finite()) {
        Ok(EstimatorState { x_hat, t })
    } else {
        Err(Error::NonFinite(format!("estimate at t = {t}")))
    }
}

/// One estimator step: solves `(AᵀQ⁻¹A + γI) x̂(t) = γ x̂(t−1) + AᵀQ⁻¹ ỹ`.
pub fn update(
    state: &EstimatorState,
    batch: &MeasurementBatch,
    config: &EstimatorConfig,
) -> Result<EstimatorState> {
    check_step(state, batch, config)?;
    if batch.n_meas() == 0 {
        return Ok(EstimatorState {
            x_hat: state.x_hat.clone(),
            t: batch.t,
        });
    }
    let gamma = config.gamma;
    let model = WeightedModel::new(&batch.a, &batch.q)?;
    let h = shifted_information(&model.info, gamma);
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("AᵀQ⁻¹A + γI".into()))?;
    let rhs = &state.x_hat * gamma + &model.weighted_t * batch.effective_y();
    let mut x = chol.solve(&rhs);
    // one refinement pass absorbs the rounding of the factor's square roots
    let residual = &rhs - &h * &x;
    x += chol.solve(&residual);
    finish(x, batch.t)
}

/// The same step written as a preconditioned gradient move:
/// `x̂(t−1) − (1/γ) Λ AᵀQ⁻¹ (A x̂(t−1) − ỹ)`, with `Λ` materialized.
pub fn update_gradient_form(
    state: &EstimatorState,
    batch: &MeasurementBatch,
    config: &EstimatorConfig,
) -> Result<EstimatorState> {
    check_step(state, batch, config)?;
    if batch.n_meas() == 0 {
        return Ok(EstimatorState {
            x_hat: state.x_hat.clone(),
            t: batch.t,
        });
    }
    let gamma = config.gamma;
    let model = WeightedModel::new(&batch.a, &batch.q)?;
    let lambda = lambda_matrix(&batch.a, &batch.q, gamma)?;
    let residual = &batch.a * &state.x_hat - batch.effective_y();
    let grad = &model.weighted_t * residual;
    finish(&state.x_hat - (lambda * grad) / gamma, batch.t)
}

/// Folds [`update`] over `batches`, returning `initial` followed by every intermediate state.
pub fn run_stream<I>(
    initial: EstimatorState,
    batches: I,
    config: &EstimatorConfig,
) -> Result<Vec<EstimatorState>>
where
    I: IntoIterator<Item = MeasurementBatch>,
{
    let mut out = vec![initial];
    for batch in batches {
        let prev = out.last().expect("non-empty");
        let next = update(prev, &batch, config).map_err(|e| Error::AtStep {
            step: batch.t,
            source: Box::new(e),
        })?;
        out.push(next);
    }
    Ok(out)
}

/// Streaming wrapper that keeps only the latest state.
#[derive(Debug, Clone)]
pub struct OnlineEstimator {
    config: EstimatorConfig,
    state: EstimatorState,
}

impl OnlineEstimator {
    pub fn new(config: EstimatorConfig, initial: EstimatorState) -> Result<Self> {
        if initial.x_hat.len() != config.n_states {
            return Err(Error::Dimension(format!(
                "initial estimate has {} entries, config expects {}",
                initial.x_hat.len(),
                config.n_states
            )));
        }
        Ok(Self {
            config,
            state: initial,
        })
    }

    pub fn step(&mut self, batch: &MeasurementBatch) -> Result<&EstimatorState> {
        self.state = update(&self.state, batch, &self.config).map_err(|e| Error::AtStep {
            step: batch.t,
            source: Box::new(e),
        })?;
        Ok(&self.state)
    }

    pub fn state(&self) -> &EstimatorState {
        &self.state
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }
}
