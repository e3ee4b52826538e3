"""Smoke test for the `ose` extension module.

    cargo build -p ose-python
    cp target/debug/libose.so python/ose.so   # ose.pyd / libose.dylib elsewhere
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import ose  # noqa: E402


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    est = ose.Estimator(1.0, 1)
    assert est.step([1.0], [[1.0]], [[1.0]]) == [0.5]
    assert est.t == 1

    assert close(ose.lambda_matrix([[1.0]], 1.0)[0][0], 0.5)
    lam_eigs, info_eigs, kernel = ose.decompose_lambda([[1.0, 0.0, 0.0]], 0.25)
    assert kernel == 2 and sorted(lam_eigs)[-2:] == [1.0, 1.0]
    assert close(info_eigs[0], 1.0)

    members = [([[1.0]], None), ([[math.sqrt(3.0)]], [[1.0]])]
    assert close(ose.psi(members, 1.0), 0.5)
    lambda_bar, c, big_c, m = ose.ensemble_constants([([[1.0]], [[1.0]])])
    assert (lambda_bar, c, big_c, m) == (1.0, 1.0, 1.0, 1.0)
    assert ose.observability_window([([[1.0, 0.0]], None), ([[0.0, 1.0]], None)], [0, 1] * 4) == 2

    assert close(ose.h_bounded(1.0, 1, 1.0, 1.0, 1.0, 1.0), 4.0)
    assert close(ose.gamma_star_bounded(1.0, 1.0, 1.0, 1.0), 1.0)
    g = ose.gamma_star_stochastic(1, 1.0, 1.0, 1.0, 1.0)
    assert ose.h_stochastic(g, 1, 1.0, 1.0, 1.0, 1.0) <= ose.h_stochastic(g * 1.01, 1, 1.0, 1.0, 1.0, 1.0)
    assert close(ose.bound_finite_bounded(3, 2, 0.5, 1.0, [(1.0, 1.0, 1.0)] * 3, 1.0), 4.5)

    library = ose.generate_library(4, 2, 3, 7)
    assert len(library) == 3
    assert all(close(sum(v * v for row in a for v in row), 1.0) for a in library)

    config = {
        "n_states": 2, "n_meas": 1, "horizon": 5, "library_size": 3, "delta_x": 1.0,
        "noise": {"kind": "bounded", "delta_n": 1.0}, "gamma": 1.0, "n_runs": 2, "seed": 0,
    }
    mean, rms = ose.monte_carlo(json.dumps(config))
    assert len(mean) == len(rms) == 5
    assert mean == ose.monte_carlo(json.dumps(config))[0]

    try:
        ose.Estimator(0.0, 1)
    except ValueError:
        pass
    else:
        raise AssertionError("gamma = 0 accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
