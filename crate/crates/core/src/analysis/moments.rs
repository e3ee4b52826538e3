use nalgebra::{DMatrix, DVector};

use crate::estimator::{lambda_matrix, MeasurementBatch};
use crate::linalg::{spd_cholesky, symmetrize, WeightedModel};
use crate::{Error, Result};

/// Mean and covariance of the estimation error `ξ(t) = x̂(t) − x(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMoments {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub t: u64,
}

impl ErrorMoments {
    /// Moments of a known initial error: `μ = ξ(0)`, `Σ = 0`.
    pub fn deterministic(xi0: DVector<f64>) -> Self {
        let n = xi0.len();
        Self {
            mu: xi0,
            sigma: DMatrix::zeros(n, n),
            t: 0,
        }
    }
}

/// Largest state dimension for which `Λ ⊗ Λ` is formed explicitly.
const KRONECKER_MAX_N: usize = 8;

fn check_vector(v: &DVector<f64>, n: usize, what: &str) -> Result<()> {
    if v.len() == n {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what} has length {}, expected {n}", v.len())))
    }
}

/// One step of `ξ(t) = Λ ξ(t−1) − Λ δ(t) + (1/γ) Λ AᵀQ⁻¹ n(t)`.
pub fn error_step(
    xi_prev: &DVector<f64>,
    batch: &MeasurementBatch,
    delta: &DVector<f64>,
    noise: &DVector<f64>,
    gamma: f64,
) -> Result<DVector<f64>> {
    let n = batch.n_states();
    check_vector(xi_prev, n, "xi")?;
    check_vector(delta, n, "delta")?;
    check_vector(noise, batch.n_meas(), "noise")?;
    let lambda = lambda_matrix(&batch.a, &batch.q, gamma)?;
    let model = WeightedModel::new(&batch.a, &batch.q)?;
    Ok(&lambda * (xi_prev - delta) + &lambda * (&model.weighted_t * noise) / gamma)
}

/// Mean and covariance after one step, with the noise covariance taken equal to `Q`:
/// `μ⁺ = Λ(μ − δ)`, `Σ⁺ = ΛΣΛᵀ + Λ (AᵀQ⁻¹A) Λᵀ / γ²`.
pub fn propagate_error_moments(
    moments: &ErrorMoments,
    batch: &MeasurementBatch,
    delta: &DVector<f64>,
    gamma: f64,
) -> Result<ErrorMoments> {
    let n = batch.n_states();
    check_vector(&moments.mu, n, "mu")?;
    check_vector(delta, n, "delta")?;
    if moments.sigma.shape() != (n, n) {
        return Err(Error::Dimension(format!("sigma must be {n}x{n}")));
    }
    let lambda = lambda_matrix(&batch.a, &batch.q, gamma)?;
    let model = WeightedModel::new(&batch.a, &batch.q)?;
    let mu = &lambda * (&moments.mu - delta);
    let mut sigma =
        &lambda * &moments.sigma * &lambda + &lambda * &model.info * &lambda / (gamma * gamma);
    symmetrize(&mut sigma);
    Ok(ErrorMoments {
        mu,
        sigma,
        t: batch.t,
    })
}

/// Vectorized covariance step `σ⁺ = F σ + F C m / γ²` with `F = Λ ⊗ Λ`,
/// `C = Aᵀ ⊗ Aᵀ` and `m = vec(Q⁻¹)` (column-major `vec`).
///
/// Above eight states the Kronecker products are not materialized and the step
/// is evaluated through the equivalent matrix form.
pub fn vectorized_sigma_step(
    sigma_vec: &DVector<f64>,
    batch: &MeasurementBatch,
    gamma: f64,
) -> Result<DVector<f64>> {
    let n = batch.n_states();
    check_vector(sigma_vec, n * n, "sigma_vec")?;
    let lambda = lambda_matrix(&batch.a, &batch.q, gamma)?;
    if n > KRONECKER_MAX_N {
        let sigma = DMatrix::from_column_slice(n, n, sigma_vec.as_slice());
        let model = WeightedModel::new(&batch.a, &batch.q)?;
        let next = &lambda * sigma * &lambda + &lambda * &model.info * &lambda / (gamma * gamma);
        return Ok(DVector::from_column_slice(next.as_slice()));
    }
    let f = lambda.kronecker(&lambda);
    let mut out = &f * sigma_vec;
    if batch.n_meas() > 0 {
        let q_inv = spd_cholesky(&batch.q, "Q")?.inverse();
        let m_vec = DVector::from_column_slice(q_inv.as_slice());
        let at = batch.a.transpose();
        let c = at.kronecker(&at);
        out += &f * (c * m_vec) / (gamma * gamma);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_batch(a: f64, q: f64) -> MeasurementBatch {
        MeasurementBatch::new(
            1,
            DVector::zeros(1),
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, q),
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_passes_moments_through() {
        let batch = MeasurementBatch::unweighted(1, DVector::zeros(2), DMatrix::zeros(2, 3)).unwrap();
        let m0 = ErrorMoments {
            mu: DVector::from_vec(vec![1.0, 2.0, 3.0]),
            sigma: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 2.0])),
            t: 0,
        };
        let delta = DVector::from_vec(vec![0.5, 0.5, -1.0]);
        let m1 = propagate_error_moments(&m0, &batch, &delta, 0.7).unwrap();
        assert_relative_eq!(m1.mu, &m0.mu - &delta, epsilon = 1e-15);
        assert_relative_eq!(m1.sigma, m0.sigma, epsilon = 1e-15);
        let s = vectorized_sigma_step(&DVector::from_column_slice(m0.sigma.as_slice()), &batch, 0.7)
            .unwrap();
        assert_relative_eq!(s, DVector::from_column_slice(m0.sigma.as_slice()), epsilon = 1e-15);
    }

    #[test]
    fn scalar_covariance_step() {
        let batch = scalar_batch(1.0, 1.0);
        let m1 = propagate_error_moments(
            &ErrorMoments::deterministic(DVector::zeros(1)),
            &batch,
            &DVector::zeros(1),
            1.0,
        )
        .unwrap();
        assert_relative_eq!(m1.sigma[(0, 0)], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn scalar_vectorized_step() {
        let (a, q, gamma, sigma) = (1.5, 0.4, 0.8, 0.3);
        let batch = scalar_batch(a, q);
        let l = gamma / (a * a / q + gamma);
        let expected = l * l * sigma + l * l * (a * a / q) / (gamma * gamma);
        let got = vectorized_sigma_step(&DVector::from_element(1, sigma), &batch, gamma).unwrap();
        assert_relative_eq!(got[0], expected, max_relative = 1e-14);
    }

    #[test]
    fn error_step_rejects_wrong_lengths() {
        let batch = scalar_batch(1.0, 1.0);
        assert!(error_step(
            &DVector::zeros(2),
            &batch,
            &DVector::zeros(1),
            &DVector::zeros(1),
            1.0
        )
        .is_err());
        assert!(error_step(
            &DVector::zeros(1),
            &batch,
            &DVector::zeros(1),
            &DVector::zeros(3),
            1.0
        )
        .is_err());
    }
}
