use nalgebra::DVector;
use ose_core::analysis::{error_step, observability_window, psi};
use ose_core::simulation::*;

fn small(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_states: 6,
        n_meas: 2,
        horizon: 40,
        library_size: 6,
        delta_x: 1.0,
        noise: NoiseModel::Bounded { delta_n: 1.0 },
        gamma: 0.25,
        n_runs: 8,
        seed,
        sequence_policy: None,
        initial_state: None,
        initial_estimate: None,
        fixed_sequence: false,
        track_covariance: false,
        rank_tolerance: 1e-10,
    }
}

#[test]
fn zero_start_zero_noise_zero_drift_is_exact() {
    let sc = ScenarioConfig {
        delta_x: 0.0,
        noise: NoiseModel::Bounded { delta_n: 0.0 },
        initial_state: Some(vec![0.0; 6]),
        ..small(1)
    };
    let run = simulate_run(&sc, 4).unwrap();
    assert!(run.per_step_error.iter().all(|&e| e == 0.0));
}

#[test]
fn noiseless_static_error_never_grows() {
    let sc = ScenarioConfig {
        delta_x: 0.0,
        noise: NoiseModel::Bounded { delta_n: 0.0 },
        initial_state: Some(vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]),
        horizon: 150,
        ..small(2)
    };
    let exp = Experiment::new(sc).unwrap();
    let run = exp.run(0).unwrap();
    let mut prev = run.xi0.norm();
    for &e in &run.per_step_error {
        assert!(e <= prev * (1.0 + 1e-12));
        prev = e;
    }
    assert!(run.per_step_error.last().unwrap() < &(0.5 * run.xi0.norm()));
}

#[test]
fn finite_bound_holds_for_every_run_and_step() {
    let exp = Experiment::new(small(3)).unwrap();
    let p = psi(exp.ensemble(), 0.25).unwrap();
    for i in 0..8 {
        let run = exp.run(i).unwrap();
        let tau = observability_window(&run.sequence, exp.ensemble()).unwrap().unwrap();
        let bound = run.bounded_bound_trajectory(tau, p, 0.25).unwrap();
        for (e, b) in run.per_step_error.iter().zip(&bound) {
            assert!(e <= b);
        }
    }
}

#[test]
fn error_recursion_reproduces_estimator_errors() {
    let exp = Experiment::new(small(6)).unwrap();
    let (run, trace) = exp.trace(2).unwrap();
    let mut xi = run.xi0.clone();
    for (k, batch) in trace.batches.iter().enumerate() {
        xi = error_step(&xi, batch, &trace.deltas[k], &trace.noises[k], 0.25).unwrap();
        let direct = &run.errors[k];
        assert!((&xi - direct).norm() <= 1e-10 * direct.norm().max(1.0));
    }
}

#[test]
fn summary_is_deterministic_and_prefix_stable() {
    let a = monte_carlo(&small(7)).unwrap();
    let b = monte_carlo(&small(7)).unwrap();
    assert_eq!(a, b);
    let single = monte_carlo(&ScenarioConfig { n_runs: 1, ..small(7) }).unwrap();
    let exp = Experiment::new(small(7)).unwrap();
    assert_eq!(single.mean_error, exp.run(0).unwrap().per_step_error);

    let doubled = Experiment::new(ScenarioConfig { n_runs: 16, ..small(7) }).unwrap();
    for i in 0..8 {
        assert_eq!(doubled.run(i).unwrap(), exp.run(i).unwrap());
    }
}

#[test]
fn summary_is_independent_of_thread_count() {
    let sc = ScenarioConfig {
        n_runs: 150,
        track_covariance: true,
        ..small(9)
    };
    let run_with = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| monte_carlo(&sc).unwrap())
    };
    let one = run_with(1);
    let many = run_with(4);
    assert_eq!(one, many);
    for (m, r) in one.mean_error.iter().zip(&one.rms_error) {
        assert!(*m >= 0.0 && r >= m);
    }
}

#[test]
fn higher_inertia_converges_no_faster_without_noise() {
    let sc = ScenarioConfig {
        delta_x: 0.0,
        noise: NoiseModel::Bounded { delta_n: 0.0 },
        initial_state: Some(vec![1.0; 6]),
        horizon: 3000,
        ..small(10)
    };
    let exp = Experiment::new(sc).unwrap();
    let reach = |gamma: f64| {
        let run = exp.with_gamma(gamma).unwrap().run(0).unwrap();
        let target = 0.01 * run.xi0.norm();
        run.per_step_error.iter().position(|&e| e < target).unwrap_or(usize::MAX)
    };
    let times: Vec<usize> = [0.1, 1.0, 10.0].into_iter().map(reach).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]), "{times:?}");
}

#[test]
fn empirical_covariance_of_static_gaussian_runs() {
    let sc = ScenarioConfig {
        n_states: 4,
        n_meas: 2,
        horizon: 10,
        library_size: 4,
        delta_x: 0.0,
        noise: NoiseModel::Gaussian { delta_n: 0.25 },
        gamma: 0.5,
        n_runs: 2000,
        seed: 12,
        sequence_policy: None,
        initial_state: Some(vec![0.0; 4]),
        initial_estimate: None,
        fixed_sequence: true,
        track_covariance: true,
        rank_tolerance: 1e-10,
    };
    let exp = Experiment::new(sc).unwrap();
    let summary = exp.monte_carlo().unwrap();
    let (_, trace) = exp.trace(0).unwrap();
    let mut mom = ose_core::analysis::ErrorMoments::deterministic(DVector::zeros(4));
    let covs = summary.empirical_cov.as_ref().unwrap();
    for (k, batch) in trace.batches.iter().enumerate() {
        mom = ose_core::analysis::propagate_error_moments(&mom, batch, &DVector::zeros(4), 0.5)
            .unwrap();
        if k + 1 == 5 || k + 1 == 10 {
            let rel = (&covs[k] - &mom.sigma).norm() / mom.sigma.norm();
            assert!(rel < 0.1, "t = {}: {rel}", k + 1);
        }
    }
}

#[test]
fn empirical_covariance_against_both_stochastic_bounds() {
    use ose_core::analysis::{bound_finite_stochastic, bound_finite_stochastic_scaled, StochasticStep};
    let gamma = 0.4;
    let sc = ScenarioConfig {
        n_states: 6,
        n_meas: 2,
        horizon: 30,
        library_size: 6,
        delta_x: 0.0,
        noise: NoiseModel::Gaussian { delta_n: 0.25 },
        gamma,
        n_runs: 2000,
        seed: 31,
        sequence_policy: None,
        initial_state: Some(vec![0.0; 6]),
        initial_estimate: None,
        fixed_sequence: true,
        track_covariance: true,
        rank_tolerance: 1e-10,
    };
    let exp = Experiment::new(sc).unwrap();
    let summary = exp.monte_carlo().unwrap();
    let frob = summary.empirical_cov_frob.as_ref().unwrap();
    let seq = exp.sequence_for(0).unwrap();
    let tau = observability_window(&seq, exp.ensemble()).unwrap().unwrap();
    let p = psi(exp.ensemble(), gamma).unwrap();
    let steps: Vec<StochasticStep> = seq
        .iter()
        .map(|&i| {
            let (capital_c, m) = exp.ensemble().kron_constants(i).unwrap();
            StochasticStep { delta_x: 0.0, capital_c, m }
        })
        .collect();
    let mut verbatim_violations = 0;
    for t in 1..=30 {
        let literal = bound_finite_stochastic(t, tau, p, 0.0, 0.0, &steps[..t]).unwrap();
        let scaled = bound_finite_stochastic_scaled(t, tau, p, 0.0, 0.0, &steps[..t], gamma).unwrap();
        assert!((scaled.sigma_bound * gamma * gamma - literal.sigma_bound).abs() <= 1e-12 * literal.sigma_bound);
        assert!(frob[t - 1] <= scaled.sigma_bound, "t = {t}: {} > {}", frob[t - 1], scaled.sigma_bound);
        if frob[t - 1] > literal.sigma_bound {
            verbatim_violations += 1;
        }
    }
    println!("literal sigma bound exceeded at {verbatim_violations}/30 steps");
}
