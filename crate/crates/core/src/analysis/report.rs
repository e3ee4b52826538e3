use serde::Serialize;

use super::{
    ensemble_constants, gamma_star_bounded, gamma_star_stochastic, h_bounded, h_covariance,
    h_mean, h_stochastic, psi, GammaSearch, SystemEnsemble,
};
use crate::{Error, Result};

/// Every theoretical constant of an ensemble together with the asymptotic bounds at one `γ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub tau: usize,
    pub psi: f64,
    pub lambda_bar: f64,
    pub c: f64,
    pub capital_c: f64,
    pub m: f64,
    pub delta_x: f64,
    pub delta_n: f64,
    pub gamma: f64,
    pub h_b: f64,
    pub h_mu: f64,
    pub h_sigma: f64,
    pub h_s: f64,
    /// Closed-form minimizer of `h_b`.
    pub gamma_star: f64,
    /// Numerical minimizer of `h_s`.
    pub gamma_star_stochastic: GammaSearch,
}

impl BoundReport {
    pub fn compute(
        ensemble: &SystemEnsemble,
        tau: usize,
        delta_x: f64,
        delta_n: f64,
        gamma: f64,
        search_interval: (f64, f64),
    ) -> Result<Self> {
        if tau == 0 {
            return Err(Error::InvalidParameter("tau must be at least 1".into()));
        }
        let k = ensemble_constants(ensemble)?;
        let psi = psi(ensemble, gamma)?;
        Ok(Self {
            tau,
            psi,
            lambda_bar: k.lambda_bar,
            c: k.c,
            capital_c: k.capital_c,
            m: k.m,
            delta_x,
            delta_n,
            gamma,
            h_b: h_bounded(gamma, tau, delta_x, k.c, delta_n, k.lambda_bar)?,
            h_mu: h_mean(gamma, tau, delta_x, k.lambda_bar)?,
            h_sigma: h_covariance(gamma, tau, k.capital_c, k.m, k.lambda_bar)?,
            h_s: h_stochastic(gamma, tau, k.capital_c, k.m, delta_x, k.lambda_bar)?,
            gamma_star: gamma_star_bounded(k.c, k.lambda_bar, delta_n, delta_x)?.gamma,
            gamma_star_stochastic: gamma_star_stochastic(
                tau,
                k.capital_c,
                k.m,
                delta_x,
                k.lambda_bar,
                search_interval,
                1e-10,
            )?,
        })
    }
}
