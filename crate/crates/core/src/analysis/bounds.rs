use serde::Serialize;

use super::check_gamma;
use crate::{Error, Result};

/// Per-step inputs to the bounded-noise finite-horizon bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundedStep {
    /// Bound on `‖δ(t)‖`.
    pub delta_x: f64,
    /// `‖A(t)ᵀQ_t⁻¹‖₂`.
    pub c: f64,
    /// Bound on `‖n(t)‖`.
    pub delta_n: f64,
}

/// Per-step inputs to the stochastic-noise finite-horizon bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StochasticStep {
    pub delta_x: f64,
    pub capital_c: f64,
    pub m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StochasticBound {
    pub mu_bound: f64,
    pub sigma_bound: f64,
}

fn check_window(tau: usize, psi: f64) -> Result<()> {
    if tau == 0 {
        return Err(Error::InvalidParameter("tau must be at least 1".into()));
    }
    if !(psi.is_finite() && (0.0..=1.0).contains(&psi)) {
        return Err(Error::InvalidParameter(format!("psi must lie in [0, 1], got {psi}")));
    }
    Ok(())
}

fn check_horizon(horizon: usize, len: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    if len != horizon {
        return Err(Error::Dimension(format!(
            "expected {horizon} per-step entries, got {len}"
        )));
    }
    Ok(())
}

fn decay(psi: f64, steps: usize, tau: usize) -> f64 {
    psi.powi((steps / tau) as i32)
}

/// `ψ^⌊T/τ⌋ ‖ξ(0)‖ + Σ_{t=1}^{T} ψ^⌊(T+1−t)/τ⌋ w(t)`.
fn windowed_sum(horizon: usize, tau: usize, psi: f64, initial: f64, w: impl Fn(usize) -> f64) -> f64 {
    let mut total = decay(psi, horizon, tau) * initial;
    for t in 1..=horizon {
        total += decay(psi, horizon + 1 - t, tau) * w(t - 1);
    }
    total
}

/// Finite-horizon bound on `‖ξ(T)‖` under bounded noise.
pub fn bound_finite_bounded(
    horizon: usize,
    tau: usize,
    psi: f64,
    xi0_norm: f64,
    per_step: &[BoundedStep],
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_window(tau, psi)?;
    check_horizon(horizon, per_step.len())?;
    Ok(windowed_sum(horizon, tau, psi, xi0_norm, |i| {
        let s = per_step[i];
        s.delta_x + s.c / gamma * s.delta_n
    }))
}

/// [`bound_finite_bounded`] evaluated at every `T = 1..=per_step.len()`.
pub fn bound_finite_bounded_trajectory(
    tau: usize,
    psi: f64,
    xi0_norm: f64,
    per_step: &[BoundedStep],
    gamma: f64,
) -> Result<Vec<f64>> {
    (1..=per_step.len())
        .map(|t| bound_finite_bounded(t, tau, psi, xi0_norm, &per_step[..t], gamma))
        .collect()
}

/// Finite-horizon bounds on `‖μ(T)‖` and `‖Σ(T)‖_F` as literally stated, without
/// the `1/γ²` factor on the noise injection.
pub fn bound_finite_stochastic(
    horizon: usize,
    tau: usize,
    psi: f64,
    xi0_norm: f64,
    sigma0_frob: f64,
    per_step: &[StochasticStep],
) -> Result<StochasticBound> {
    check_window(tau, psi)?;
    check_horizon(horizon, per_step.len())?;
    Ok(StochasticBound {
        mu_bound: windowed_sum(horizon, tau, psi, xi0_norm, |i| per_step[i].delta_x),
        sigma_bound: windowed_sum(horizon, tau, psi, sigma0_frob, |i| {
            per_step[i].capital_c * per_step[i].m
        }),
    })
}

/// Same as [`bound_finite_stochastic`] with the noise injection scaled by `1/γ²`,
/// which is what the covariance recursion actually adds each step.
pub fn bound_finite_stochastic_scaled(
    horizon: usize,
    tau: usize,
    psi: f64,
    xi0_norm: f64,
    sigma0_frob: f64,
    per_step: &[StochasticStep],
    gamma: f64,
) -> Result<StochasticBound> {
    check_gamma(gamma)?;
    let mut out = bound_finite_stochastic(horizon, tau, psi, xi0_norm, sigma0_frob, per_step)?;
    out.sigma_bound = windowed_sum(horizon, tau, psi, sigma0_frob, |i| {
        per_step[i].capital_c * per_step[i].m / (gamma * gamma)
    });
    Ok(out)
}

/// `H_b(γ) = τ (Δx + cΔn/γ)(1 + γ/λ̄)`.
pub fn h_bounded(
    gamma: f64,
    tau: usize,
    delta_x: f64,
    c: f64,
    delta_n: f64,
    lambda_bar: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_lambda_bar(lambda_bar)?;
    Ok(tau as f64 * (delta_x + c * delta_n / gamma) * (1.0 + gamma / lambda_bar))
}

/// Asymptotic bound on `‖μ‖`: `τ Δx (1 + γ/λ̄)`.
pub fn h_mean(gamma: f64, tau: usize, delta_x: f64, lambda_bar: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_lambda_bar(lambda_bar)?;
    Ok(tau as f64 * delta_x * (1.0 + gamma / lambda_bar))
}

/// Asymptotic bound on `‖Σ‖_F`: `τ C m / γ² (1 + γ/λ̄)`.
pub fn h_covariance(gamma: f64, tau: usize, capital_c: f64, m: f64, lambda_bar: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_lambda_bar(lambda_bar)?;
    Ok(tau as f64 * capital_c * m / (gamma * gamma) * (1.0 + gamma / lambda_bar))
}

/// `H_s(γ) = τ √(C²m²/γ⁴ + Δx²) (1 + γ/λ̄)`.
pub fn h_stochastic(
    gamma: f64,
    tau: usize,
    capital_c: f64,
    m: f64,
    delta_x: f64,
    lambda_bar: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_lambda_bar(lambda_bar)?;
    let cm = capital_c * m;
    let g2 = gamma * gamma;
    Ok(tau as f64 * (cm * cm / (g2 * g2) + delta_x * delta_x).sqrt() * (1.0 + gamma / lambda_bar))
}

fn check_lambda_bar(lambda_bar: f64) -> Result<()> {
    if lambda_bar.is_finite() && lambda_bar > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "lambda_bar must be positive, got {lambda_bar}"
        )))
    }
}

/// Closed-form minimizer of [`h_bounded`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaStar {
    pub gamma: f64,
    /// Set when `Δn = 0`: the bound then decreases toward `γ → 0` and `0` is only the limit.
    pub at_boundary: bool,
}

/// `γ* = √(c λ̄ Δn / Δx)`.
pub fn gamma_star_bounded(c: f64, lambda_bar: f64, delta_n: f64, delta_x: f64) -> Result<GammaStar> {
    if !(delta_x.is_finite() && delta_x > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "delta_x must be positive for a finite minimizer, got {delta_x}"
        )));
    }
    if c < 0.0 || lambda_bar < 0.0 || delta_n < 0.0 {
        return Err(Error::InvalidParameter(
            "c, lambda_bar and delta_n must be nonnegative".into(),
        ));
    }
    let gamma = (c * lambda_bar * delta_n / delta_x).sqrt();
    Ok(GammaStar {
        gamma,
        at_boundary: gamma == 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    GoldenSection,
    GridFallback,
}

/// Numerical minimizer of [`h_stochastic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaSearch {
    pub gamma: f64,
    pub h_value: f64,
    pub method: SearchMethod,
    /// False when the sampled profile had more than one local minimum.
    pub unimodal: bool,
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) || n == 0 {
        return Err(Error::InvalidParameter(format!(
            "log grid needs 0 < lo <= hi and n >= 1, got lo = {lo}, hi = {hi}, n = {n}"
        )));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect())
}

/// Index and value of the smallest `f` over `grid` (first one on ties).
pub fn grid_argmin(grid: &[f64], f: impl Fn(f64) -> Result<f64>) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &g) in grid.iter().enumerate() {
        let v = f(g)?;
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.ok_or_else(|| Error::InvalidParameter("empty grid".into()))
}

const PROFILE_SAMPLES: usize = 257;
const CROSS_CHECK_SAMPLES: usize = 10_000;

fn is_unimodal(values: &[f64]) -> bool {
    let scale = values.iter().cloned().fold(0.0_f64, |a, v| a.max(v.abs()));
    let eps = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut rising = false;
    for pair in values.windows(2) {
        let d = pair[1] - pair[0];
        if d > eps {
            rising = true;
        } else if d < -eps && rising {
            return false;
        }
    }
    true
}

/// Minimizes [`h_stochastic`] over `interval` by golden-section search on `ln γ`.
///
/// The result is cross-checked against a dense log grid; when the sampled profile
/// is not unimodal, or the grid finds a strictly better point, the grid argmin is
/// returned with [`SearchMethod::GridFallback`].
pub fn gamma_star_stochastic(
    tau: usize,
    capital_c: f64,
    m: f64,
    delta_x: f64,
    lambda_bar: f64,
    interval: (f64, f64),
    tolerance: f64,
) -> Result<GammaSearch> {
    let (lo, hi) = interval;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "search interval must satisfy 0 < lo < hi, got ({lo}, {hi})"
        )));
    }
    if !(tolerance > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let h = |g: f64| h_stochastic(g, tau, capital_c, m, delta_x, lambda_bar);

    let profile = log_grid(lo, hi, PROFILE_SAMPLES)?
        .into_iter()
        .map(h)
        .collect::<Result<Vec<_>>>()?;
    let unimodal = is_unimodal(&profile);

    let grid = log_grid(lo, hi, CROSS_CHECK_SAMPLES)?;
    let (grid_idx, grid_val) = grid_argmin(&grid, h)?;
    let fallback = GammaSearch {
        gamma: grid[grid_idx],
        h_value: grid_val,
        method: SearchMethod::GridFallback,
        unimodal,
    };
    if !unimodal {
        return Ok(fallback);
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = h(x1.exp())?;
    let mut f2 = h(x2.exp())?;
    while b.exp() - a.exp() > tolerance {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = h(x1.exp())?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = h(x2.exp())?;
        }
    }
    let gamma = (0.5 * (a + b)).exp().clamp(lo, hi);
    let h_value = h(gamma)?;
    if grid_val < h_value * (1.0 - 1e-9) {
        return Ok(fallback);
    }
    Ok(GammaSearch {
        gamma,
        h_value,
        method: SearchMethod::GoldenSection,
        unimodal,
    })
}
