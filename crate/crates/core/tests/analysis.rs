use nalgebra::{DMatrix, DVector};
use ose_core::analysis::*;
use ose_core::estimator::{lambda_matrix, MeasurementBatch};
use ose_core::simulation::seed::rng_from_seed;
use ose_core::simulation::{Experiment, NoiseModel, ScenarioConfig};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn normal_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn member(a: DMatrix<f64>) -> EnsembleMember {
    let m = a.nrows();
    EnsembleMember {
        a,
        q: DMatrix::identity(m, m),
    }
}

#[test]
fn alternating_coordinate_rows_need_two_steps() {
    let ens = SystemEnsemble::new(vec![
        member(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
        member(DMatrix::from_row_slice(1, 2, &[0.0, 1.0])),
    ])
    .unwrap();
    assert_eq!(observability_window(&[0, 1, 0, 1, 0, 1], &ens).unwrap(), Some(2));
    assert_eq!(observability_window(&[0, 0, 1], &ens).unwrap(), Some(3));
    assert_eq!(observability_window(&[0, 0, 0], &ens).unwrap(), None);
}

#[test]
fn reference_sequences_need_five_steps() {
    // 3 x 15 models: five stacked matrices are the fewest that can reach rank 15
    for seed in 0..5 {
        let exp = Experiment::new(ScenarioConfig::reference_bounded(0.25, 200, 1, seed)).unwrap();
        let seq = exp.sequence_for(0).unwrap();
        assert_eq!(observability_window(&seq, exp.ensemble()).unwrap(), Some(5));
    }
}

#[test]
fn identity_windows_do_not_contract() {
    let id = DMatrix::<f64>::identity(3, 3);
    assert_eq!(contraction_norm(&[id.clone(), id.clone()]).unwrap(), 1.0);
    let blind = lambda_matrix(&DMatrix::zeros(1, 3), &DMatrix::identity(1, 1), 0.5).unwrap();
    assert!((contraction_norm(&[blind]).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn short_windows_of_reference_sequence_do_not_contract() {
    let exp = Experiment::new(ScenarioConfig::reference_bounded(0.25, 60, 1, 2)).unwrap();
    let ens = exp.ensemble();
    let seq = exp.sequence_for(0).unwrap();
    let lambdas: Vec<_> = seq
        .iter()
        .map(|&i| lambda_matrix(&ens.members()[i].a, &ens.members()[i].q, 0.25).unwrap())
        .collect();
    for w in lambdas.windows(4) {
        assert!((contraction_norm(w).unwrap() - 1.0).abs() < 1e-12);
    }
    for w in lambdas.windows(5) {
        assert!(contraction_norm(w).unwrap() < 1.0);
    }
}

/// Transition `Λ(to) ⋯ Λ(from+1)`.
fn transition(lambdas: &[DMatrix<f64>], from: usize, to: usize) -> DMatrix<f64> {
    let n = lambdas[0].nrows();
    lambdas[from..to].iter().fold(DMatrix::identity(n, n), |acc, l| l * acc)
}

#[test]
fn moment_recursion_matches_accumulated_products() {
    let mut rng = rng_from_seed(4);
    let (n, gamma) = (5, 0.6);
    let batches: Vec<MeasurementBatch> = (1..=15)
        .map(|t| {
            let m = 2;
            let b = normal_matrix(&mut rng, m, m);
            MeasurementBatch::new(
                t,
                DVector::zeros(m),
                normal_matrix(&mut rng, m, n),
                &b * b.transpose() + DMatrix::identity(m, m),
                None,
            )
            .unwrap()
        })
        .collect();
    let deltas: Vec<DVector<f64>> = (0..15)
        .map(|_| DVector::from_fn(n, |_, _| rng.sample(StandardNormal)))
        .collect();
    let lambdas: Vec<DMatrix<f64>> = batches
        .iter()
        .map(|b| {
            let info = b.a.transpose() * b.q.clone().try_inverse().unwrap() * &b.a;
            (info + DMatrix::identity(n, n) * gamma).try_inverse().unwrap() * gamma
        })
        .collect();
    let mu0 = DVector::from_fn(n, |i, _| i as f64 - 2.0);
    let sigma0 = DMatrix::from_fn(n, n, |i, j| if i == j { 0.3 } else { 0.05 });
    let mut mom = ErrorMoments {
        mu: mu0.clone(),
        sigma: sigma0.clone(),
        t: 0,
    };
    for big_t in 1..=15 {
        mom = propagate_error_moments(&mom, &batches[big_t - 1], &deltas[big_t - 1], gamma).unwrap();
        let phi0 = transition(&lambdas, 0, big_t);
        let mut mu = &phi0 * &mu0;
        let mut sigma = &phi0 * &sigma0 * phi0.transpose();
        for t in 1..=big_t {
            let b = &batches[t - 1];
            let phi = transition(&lambdas, t - 1, big_t);
            mu -= &phi * &deltas[t - 1];
            let l = &lambdas[t - 1];
            let info = b.a.transpose() * b.q.clone().try_inverse().unwrap() * &b.a;
            let after = transition(&lambdas, t, big_t);
            sigma += &after * l * info * l * after.transpose() / (gamma * gamma);
        }
        assert!((&mom.mu - &mu).norm() <= 1e-10 * mu.norm().max(1.0));
        assert!((&mom.sigma - &sigma).norm() <= 1e-10 * sigma.norm());
    }
}

#[test]
fn vectorized_step_handles_large_states_through_matrix_form() {
    let mut rng = rng_from_seed(9);
    let n = 10;
    let batch = MeasurementBatch::unweighted(1, DVector::zeros(3), normal_matrix(&mut rng, 3, n)).unwrap();
    let sigma = DMatrix::<f64>::identity(n, n) * 0.2;
    let mom = ErrorMoments {
        mu: DVector::zeros(n),
        sigma: sigma.clone(),
        t: 0,
    };
    let matrix = propagate_error_moments(&mom, &batch, &DVector::zeros(n), 0.5).unwrap();
    let vec = vectorized_sigma_step(&DVector::from_column_slice(sigma.as_slice()), &batch, 0.5).unwrap();
    let back = DMatrix::from_column_slice(n, n, vec.as_slice());
    assert!((back - matrix.sigma).norm() < 1e-12);
}

#[test]
fn finite_bounds_hand_values() {
    let step = |d| BoundedStep {
        delta_x: d,
        c: 1.0,
        delta_n: 1.0,
    };
    // ψ^1·1 + ψ^1·2 + ψ^1·2 + ψ^0·2 with ψ = 0.5, τ = 2
    let b = bound_finite_bounded(3, 2, 0.5, 1.0, &[step(1.0), step(1.0), step(1.0)], 1.0).unwrap();
    assert!((b - 4.5).abs() < 1e-15);
    let s = StochasticStep {
        delta_x: 1.0,
        capital_c: 0.0,
        m: 0.0,
    };
    let sb = bound_finite_stochastic(3, 2, 0.5, 1.0, 0.0, &[s, s, s]).unwrap();
    assert!((sb.mu_bound - 2.5).abs() < 1e-15);
}

#[test]
fn stochastic_minimizer_invariant_to_common_scaling() {
    let base = gamma_star_stochastic(5, 1.0, 1.2, 0.8, 0.1, (1e-3, 1e3), 1e-10).unwrap();
    for k in [0.1, 3.0, 40.0] {
        let scaled = gamma_star_stochastic(5, k, 1.2, 0.8 * k, 0.1, (1e-3, 1e3), 1e-10).unwrap();
        assert!((scaled.gamma / base.gamma - 1.0).abs() < 1e-6);
    }
    let monotone = gamma_star_stochastic(5, 0.0, 1.0, 1.0, 0.1, (1e-3, 1e3), 1e-10).unwrap();
    assert!(monotone.gamma < 1e-3 * 1.0001);
}

#[test]
fn report_agrees_with_direct_calls() {
    let ens = SystemEnsemble::new(vec![member(DMatrix::identity(1, 1))]).unwrap();
    let r = BoundReport::compute(&ens, 1, 1.0, 1.0, 1.0, (1e-3, 1e3)).unwrap();
    assert_eq!(r.h_b, h_bounded(1.0, 1, 1.0, 1.0, 1.0, 1.0).unwrap());
    assert_eq!(r.h_b, 4.0);
    assert_eq!(r.h_s, h_stochastic(1.0, 1, 1.0, 1.0, 1.0, 1.0).unwrap());
    assert_eq!(r.gamma_star, 1.0);
    assert_eq!(r.psi, 0.5);
}

#[test]
fn rank_zero_member_is_named() {
    let ens = SystemEnsemble::new(vec![
        member(DMatrix::identity(2, 2)),
        member(DMatrix::zeros(1, 2)),
    ])
    .unwrap();
    assert!(matches!(
        ensemble_constants(&ens),
        Err(ose_core::Error::RankDeficient { member: 1 })
    ));
}

#[test]
fn gaussian_library_constants() {
    let exp = Experiment::new(ScenarioConfig::reference_gaussian(0.4, 10, 1, 1)).unwrap();
    let k = ensemble_constants(exp.ensemble()).unwrap();
    assert!((k.capital_c - 1.0).abs() < 1e-12);
    // Q = 0.25 I on three rows: ‖Q⁻¹‖_F = 4√3
    assert!((k.m - 4.0 * 3f64.sqrt()).abs() < 1e-12);
    assert_eq!(
        exp.scenario().noise,
        NoiseModel::Gaussian { delta_n: 0.25 }
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kronecker_spectrum_is_pairwise_products(n in 1usize..=5, m in 1usize..=4, lg in -2.0f64..1.0, seed in any::<u64>()) {
        let gamma = 10f64.powf(lg);
        let mut rng = rng_from_seed(seed);
        let lambda = lambda_matrix(&normal_matrix(&mut rng, m, n), &DMatrix::identity(m, m), gamma).unwrap();
        let eigs: Vec<f64> = lambda.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        let mut pairs: Vec<f64> = eigs.iter().flat_map(|x| eigs.iter().map(move |y| x * y)).collect();
        pairs.sort_by(f64::total_cmp);
        let mut f: Vec<f64> = lambda.kronecker(&lambda).symmetric_eigen().eigenvalues.iter().copied().collect();
        f.sort_by(f64::total_cmp);
        for (x, y) in f.iter().zip(&pairs) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn bounded_bound_is_monotone_in_inputs(
        t in 1usize..30, tau in 1usize..6, psi_v in 0.0f64..1.0, x0 in 0.0f64..5.0, extra in 0.0f64..1.0,
    ) {
        let steps: Vec<BoundedStep> = (0..t).map(|i| BoundedStep { delta_x: 0.1 * i as f64, c: 0.8, delta_n: 0.5 }).collect();
        let base = bound_finite_bounded(t, tau, psi_v, x0, &steps, 0.3).unwrap();
        let more = bound_finite_bounded(t, tau, psi_v, x0 + extra, &steps, 0.3).unwrap();
        prop_assert!(more >= base);
        let worse = bound_finite_bounded(t, tau, (psi_v + extra * (1.0 - psi_v)).min(1.0), x0, &steps, 0.3).unwrap();
        prop_assert!(worse >= base - 1e-12);
    }

    #[test]
    fn gamma_star_bounded_minimizes(c in 0.1f64..2.0, lb in 0.01f64..1.0, dn in 0.01f64..3.0, dx in 0.01f64..3.0, tau in 1usize..8) {
        let g = gamma_star_bounded(c, lb, dn, dx).unwrap().gamma;
        let h = |x| h_bounded(x, tau, dx, c, dn, lb).unwrap();
        prop_assert!(h(g) <= h(g * 1.01) && h(g) <= h(g / 1.01));
    }
}
