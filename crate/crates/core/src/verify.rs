//! Numerical invariant suite on a small (N = 4, M = 2) instance.
//!
//! Every check compares the library against an independent computation: explicit
//! matrix inverses instead of factorizations, accumulated transition products
//! instead of recursions, dense grids instead of closed forms.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::analysis::{
    bound_finite_stochastic, contraction_norm, ensemble_constants, gamma_star_bounded,
    gamma_star_stochastic, grid_argmin, h_bounded, h_stochastic, log_grid, observability_window,
    propagate_error_moments, psi, vectorized_sigma_step, error_step, ErrorMoments,
    StochasticStep,
};
use crate::estimator::{
    decompose_lambda, lambda_matrix, update, update_gradient_form, EstimatorConfig,
    EstimatorState, MeasurementBatch,
};
use crate::linalg::{numerical_rank, spectral_norm};
use crate::simulation::seed::{derive_seed, rng_from_seed};
use crate::simulation::{Experiment, NoiseModel, ScenarioConfig};
use crate::Result;

pub const VERIFY_N: usize = 4;
pub const VERIFY_M: usize = 2;
const VERIFY_HORIZON: usize = 20;
const RANDOM_CASES: usize = 25;
const GRID_POINTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// `γ (AᵀQ⁻¹A + γI)⁻¹` through explicit inverses.
pub fn oracle_lambda(a: &DMatrix<f64>, q: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let n = a.ncols();
    let j = oracle_info(a, q);
    (j + DMatrix::identity(n, n) * gamma)
        .try_inverse()
        .expect("shifted information is invertible")
        * gamma
}

/// `AᵀQ⁻¹A` through an explicit inverse of `Q`.
pub fn oracle_info(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::zeros(a.ncols(), a.ncols());
    }
    a.transpose() * q.clone().try_inverse().expect("Q is invertible") * a
}

fn oracle_weighted_t(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * q.clone().try_inverse().expect("Q is invertible")
}

/// Dense LU solve of `(AᵀQ⁻¹A + γI) w = γ x̂ + AᵀQ⁻¹ ỹ`.
pub fn oracle_update(prev: &DVector<f64>, batch: &MeasurementBatch, gamma: f64) -> DVector<f64> {
    let n = prev.len();
    let h = oracle_info(&batch.a, &batch.q) + DMatrix::identity(n, n) * gamma;
    let rhs = prev * gamma + oracle_weighted_t(&batch.a, &batch.q) * batch.effective_y();
    h.lu().solve(&rhs).expect("nonsingular")
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn rel_err_m(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn gaussian_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn random_spd(rng: &mut impl Rng, m: usize) -> DMatrix<f64> {
    let b = gaussian_matrix(rng, m, m);
    &b * b.transpose() + DMatrix::identity(m, m) * 0.5
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Shrinks `base` to the verification instance, keeping its seed, γ and noise levels.
pub fn verification_scenario(base: &ScenarioConfig) -> ScenarioConfig {
    ScenarioConfig {
        n_states: VERIFY_N,
        n_meas: VERIFY_M,
        horizon: VERIFY_HORIZON,
        library_size: base.library_size.max(3),
        n_runs: 1,
        sequence_policy: None,
        initial_state: None,
        initial_estimate: None,
        fixed_sequence: false,
        track_covariance: false,
        ..base.clone()
    }
}

struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    fn push(&mut self, name: &'static str, passed: bool, detail: String) {
        self.checks.push(Check {
            name,
            passed,
            detail,
        });
    }
}

/// Runs every invariant; numerical failures inside a check are reported as failed checks.
pub fn run_invariant_suite(base: &ScenarioConfig) -> Result<VerifyReport> {
    let sc = verification_scenario(base);
    sc.validate()?;
    let gamma = sc.gamma;
    let mut suite = Suite { checks: Vec::new() };
    let mut rng = rng_from_seed(derive_seed(sc.seed, 0x7665_7269_6679));

    // estimator step against a dense solve, the gradient form and stationarity
    let (mut dense, mut grad_form, mut stationarity, mut expansion) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut spectrum, mut kernel, mut recon, mut fspec) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut kernel_dims_ok = true;
    let cfg = EstimatorConfig::new(gamma, VERIFY_N)?;
    for _ in 0..RANDOM_CASES {
        let m = rng.random_range(1..=VERIFY_M + 1);
        let a = gaussian_matrix(&mut rng, m, VERIFY_N);
        let q = random_spd(&mut rng, m);
        let b = gaussian_vector(&mut rng, m);
        let batch = MeasurementBatch::new(1, gaussian_vector(&mut rng, m), a.clone(), q.clone(), Some(b))?;
        let prev = EstimatorState::new(gaussian_vector(&mut rng, VERIFY_N))?;
        let w = update(&prev, &batch, &cfg)?.x_hat;
        let oracle = oracle_update(&prev.x_hat, &batch, gamma);
        dense = dense.max(rel_err(&w, &oracle));
        grad_form = grad_form.max(rel_err(&update_gradient_form(&prev, &batch, &cfg)?.x_hat, &w));
        let grad = oracle_weighted_t(&a, &q) * (&a * &w - batch.effective_y())
            + (&w - &prev.x_hat) * gamma;
        let scale = (oracle_weighted_t(&a, &q) * batch.effective_y()).norm() + gamma * prev.x_hat.norm();
        stationarity = stationarity.max(grad.norm() / scale);

        let lambda = lambda_matrix(&a, &q, gamma)?;
        for _ in 0..4 {
            let x = gaussian_vector(&mut rng, VERIFY_N);
            expansion = expansion.max((&lambda * &x).norm() / x.norm());
        }

        let dec = decompose_lambda(&a, &q, gamma, sc.rank_tolerance)?;
        let oracle_eigs = sorted(oracle_lambda(&a, &q, gamma).symmetric_eigen().eigenvalues.iter().copied().collect());
        let eigs = sorted(dec.lambda_eigenvalues());
        for (x, y) in eigs.iter().zip(&oracle_eigs) {
            spectrum = spectrum.max((x - y).abs());
        }
        let rank = numerical_rank(&a, sc.rank_tolerance);
        kernel_dims_ok &= dec.kernel_basis.ncols() == VERIFY_N - rank
            && eigs.iter().filter(|&&e| e == 1.0).count() == VERIFY_N - rank;
        if dec.kernel_basis.ncols() > 0 {
            kernel = kernel.max((&a * &dec.kernel_basis).norm());
        }
        recon = recon.max(rel_err_m(&dec.reconstruct(), &lambda));

        let f_eigs = sorted(lambda.kronecker(&lambda).symmetric_eigen().eigenvalues.iter().copied().collect());
        let mut pairs = Vec::new();
        for x in &oracle_eigs {
            for y in &oracle_eigs {
                pairs.push(x * y);
            }
        }
        for (x, y) in f_eigs.iter().zip(sorted(pairs).iter()) {
            fspec = fspec.max((x - y).abs());
        }
    }
    suite.push("update_matches_dense_solve", dense <= 1e-10, format!("max relative error {dense:.3e}"));
    suite.push("gradient_form_matches_update", grad_form <= 1e-10, format!("max relative error {grad_form:.3e}"));
    suite.push("update_is_stationary", stationarity <= 1e-10, format!("max scaled gradient {stationarity:.3e}"));
    suite.push("lambda_non_expansive", expansion <= 1.0 + 1e-12, format!("max ‖Λx‖/‖x‖ = {expansion:.15}"));
    suite.push("lambda_spectrum", spectrum <= 1e-10 && kernel_dims_ok, format!("max eigenvalue gap {spectrum:.3e}, kernel dimensions consistent: {kernel_dims_ok}"));
    suite.push("kernel_of_j_is_kernel_of_a", kernel <= 1e-10, format!("max ‖A V‖_F = {kernel:.3e}"));
    suite.push("lambda_reconstruction", recon <= 1e-10, format!("max relative error {recon:.3e}"));
    suite.push("kronecker_spectrum", fspec <= 1e-8, format!("max eigenvalue gap {fspec:.3e}"));

    // generated instance: windows, recursion, bounds
    let exp = Experiment::new(ScenarioConfig {
        noise: NoiseModel::Bounded {
            delta_n: sc.noise.delta_n(),
        },
        ..sc.clone()
    })?;
    let ens = exp.ensemble();
    let (run, trace) = exp.trace(0)?;
    let tau = observability_window(&run.sequence, ens)?;
    let psi_val = psi(ens, gamma)?;
    let Some(tau) = tau else {
        suite.push("observability_window", false, "no finite window".into());
        return Ok(VerifyReport { checks: suite.checks });
    };
    suite.push("observability_window", tau <= VERIFY_HORIZON, format!("tau = {tau}"));

    let lambdas: Vec<DMatrix<f64>> = trace
        .batches
        .iter()
        .map(|b| oracle_lambda(&b.a, &b.q, gamma))
        .collect();
    let mut worst_window = 0.0f64;
    let mut worst_f = 0.0f64;
    for w in lambdas.windows(tau) {
        worst_window = worst_window.max(contraction_norm(w)?);
        let mut f = DMatrix::identity(VERIFY_N * VERIFY_N, VERIFY_N * VERIFY_N);
        for l in w {
            f = l.kronecker(l) * f;
        }
        worst_f = worst_f.max(spectral_norm(&f));
    }
    suite.push(
        "window_products_contract",
        worst_window < 1.0,
        format!("max ‖∏Λ‖ over {tau}-windows = {worst_window:.6}; ψ = {psi_val:.6} (≤ ψ: {})", worst_window <= psi_val),
    );
    suite.push(
        "kronecker_window_products_contract",
        worst_f < 1.0,
        format!("max ‖∏Λ⊗Λ‖ = {worst_f:.6}"),
    );

    // error recursion and the accumulated-product expansion
    let mut xi = run.xi0.clone();
    let mut recursion = 0.0f64;
    for (k, batch) in trace.batches.iter().enumerate() {
        xi = error_step(&xi, batch, &trace.deltas[k], &trace.noises[k], gamma)?;
        recursion = recursion.max((&xi - &run.errors[k]).norm() / run.errors[k].norm().max(1.0));
    }
    suite.push("error_recursion_matches_estimator", recursion <= 1e-10, format!("max relative gap {recursion:.3e}"));

    let mut expansion_gap = 0.0f64;
    for horizon in 1..=VERIFY_HORIZON {
        let mut total = transition(&lambdas, 0, horizon) * &run.xi0;
        for t in 1..=horizon {
            let b = &trace.batches[t - 1];
            let l = &lambdas[t - 1];
            let drive = -(l * &trace.deltas[t - 1]) + l * oracle_weighted_t(&b.a, &b.q) * &trace.noises[t - 1] / gamma;
            total += transition(&lambdas, t, horizon) * drive;
        }
        let direct = &run.errors[horizon - 1];
        expansion_gap = expansion_gap.max((&total - direct).norm() / direct.norm().max(1.0));
    }
    suite.push("error_expansion_matches_recursion", expansion_gap <= 1e-10, format!("max relative gap {expansion_gap:.3e}"));

    let bound = run.bounded_bound_trajectory(tau, psi_val, gamma)?;
    let violations = run
        .per_step_error
        .iter()
        .zip(&bound)
        .filter(|(e, b)| e > b)
        .count();
    let slack = run
        .per_step_error
        .iter()
        .zip(&bound)
        .map(|(e, b)| e / b)
        .fold(0.0, f64::max);
    suite.push("finite_bound_bounded_noise", violations == 0, format!("{violations} violations, max ‖ξ‖/bound = {slack:.4}"));

    // stochastic moments: mean bound and three covariance computations
    let xi0 = run.xi0.clone();
    let mut moments = ErrorMoments::deterministic(xi0.clone());
    let mut sigma_vec = DVector::zeros(VERIFY_N * VERIFY_N);
    let mut steps = Vec::new();
    let (mut mean_violation, mut cov_gap, mut vec_gap) = (0usize, 0.0f64, 0.0f64);
    for t in 1..=VERIFY_HORIZON {
        let batch = &trace.batches[t - 1];
        let delta = &trace.deltas[t - 1];
        moments = propagate_error_moments(&moments, batch, delta, gamma)?;
        sigma_vec = vectorized_sigma_step(&sigma_vec, batch, gamma)?;
        steps.push(StochasticStep {
            delta_x: delta.norm(),
            capital_c: batch.a.norm().powi(2),
            m: batch.q.clone().try_inverse().expect("Q invertible").norm(),
        });
        let mb = bound_finite_stochastic(t, tau, psi_val, xi0.norm(), 0.0, &steps)?;
        if moments.mu.norm() > mb.mu_bound {
            mean_violation += 1;
        }

        let mut closed = DMatrix::zeros(VERIFY_N, VERIFY_N);
        for k in 1..=t {
            let b = &trace.batches[k - 1];
            let l = &lambdas[k - 1];
            let phi = transition(&lambdas, k, t);
            closed += &phi * l * oracle_info(&b.a, &b.q) * l * phi.transpose() / (gamma * gamma);
        }
        cov_gap = cov_gap.max(rel_err_m(&moments.sigma, &closed));
        let unvec = DMatrix::from_column_slice(VERIFY_N, VERIFY_N, sigma_vec.as_slice());
        vec_gap = vec_gap.max(rel_err_m(&unvec, &moments.sigma));
    }
    suite.push("mean_bound_holds", mean_violation == 0, format!("{mean_violation} violations"));
    suite.push("covariance_recursion_matches_closed_form", cov_gap <= 1e-10, format!("max relative gap {cov_gap:.3e}"));
    suite.push("vectorized_covariance_matches_matrix_form", vec_gap <= 1e-10, format!("max relative gap {vec_gap:.3e}"));

    // optimal inertia against dense grids
    let k = ensemble_constants(ens)?;
    let (dx, dn) = (sc.delta_x.max(1e-12), sc.noise.delta_n());
    let star = gamma_star_bounded(k.c, k.lambda_bar, dn, dx)?;
    let grid = log_grid(1e-4, 1e4, GRID_POINTS)?;
    let cell = (grid[1] / grid[0]).ln();
    let (idx, _) = grid_argmin(&grid, |g| h_bounded(g, tau, dx, k.c, dn, k.lambda_bar))?;
    let gap = (grid[idx].ln() - star.gamma.ln()).abs();
    suite.push(
        "gamma_star_matches_grid",
        star.at_boundary || gap <= cell,
        format!("closed form {:.6}, grid {:.6}, log gap {gap:.2e} (cell {cell:.2e})", star.gamma, grid[idx]),
    );
    let search = gamma_star_stochastic(tau, k.capital_c, k.m, dx, k.lambda_bar, (1e-4, 1e4), 1e-10)?;
    let (sidx, _) = grid_argmin(&grid, |g| h_stochastic(g, tau, k.capital_c, k.m, dx, k.lambda_bar))?;
    let sgap = (grid[sidx].ln() - search.gamma.ln()).abs();
    suite.push(
        "stochastic_gamma_star_matches_grid",
        sgap <= cell,
        format!("search {:.6} ({:?}), grid {:.6}", search.gamma, search.method, grid[sidx]),
    );

    Ok(VerifyReport { checks: suite.checks })
}

/// `Λ(to) ⋯ Λ(from+1)` (1-based steps), the identity when `from == to`.
fn transition(lambdas: &[DMatrix<f64>], from: usize, to: usize) -> DMatrix<f64> {
    let n = lambdas[0].nrows();
    let mut out = DMatrix::identity(n, n);
    for l in &lambdas[from..to] {
        out = l * out;
    }
    out
}
