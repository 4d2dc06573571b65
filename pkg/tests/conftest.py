"""Shared fixtures: closed-form toy flow, canonical datasets, fitted models.

The expensive multi-seed training fixtures live here (session scope) so the
benchmark-grade tests in test_acceptance.py and the reward-trend check in
test_ddpg.py share one run per seed instead of retraining.
"""

import dataclasses
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from koopest import config as cfgmod
from koopest import edmd
from koopest.dictionary import dictionary_from_terms, lift_matrix
from koopest.dynamics import (
    Disk,
    ToySystem,
    Trajectory,
    build_snapshot_dataset,
    sample_initial_conditions,
    simulate,
)
from koopest.estimator import (
    HybridEstimator,
    evaluate_many,
    rollout,
    rl_only_baseline,
    train_hybrid,
)

settings.register_profile(
    "research",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("research")


# generator of the lifted toy dynamics d/dt (x1, x2, x1^2)
TOY_GENERATOR = np.array([
    [-0.7, 0.0, 0.0],
    [0.0, -0.3, 0.3],
    [0.0, 0.0, -1.4],
])


def toy_flow(x0, t: float) -> np.ndarray:
    """Analytic solution of the toy system from x0 after time t."""
    x1, x2 = float(x0[0]), float(x0[1])
    y1 = x1 * np.exp(-0.7 * t)
    y2 = np.exp(-0.3 * t) * x2 + (0.3 / 1.1) * x1**2 * (
        np.exp(-0.3 * t) - np.exp(-1.4 * t)
    )
    return np.array([y1, y2])


def example1_dictionary():
    """The three-observable basis {x1, x2, x1^2} that closes the toy flow."""
    return dictionary_from_terms(2, [(1, 0), (0, 1), (2, 0)])


@pytest.fixture(scope="session")
def toy_noiseless():
    """20 noiseless toy trajectories, dt 0.1, 200 steps: 4000 snapshot pairs."""
    system = ToySystem()
    ics = sample_initial_conditions(Disk(10.0), 20, seed=100)
    trajectories = [simulate(system, x0, 0.1, 200) for x0 in ics]
    return trajectories, build_snapshot_dataset(trajectories)


@pytest.fixture(scope="session")
def example1_model(toy_noiseless):
    _, dataset = toy_noiseless
    d = example1_dictionary()
    return edmd.fit_reduced(
        lift_matrix(d, dataset.x),
        lift_matrix(d, dataset.y),
        d,
        edmd.RankPolicy.energy(1.0),
    )


def _closed_loop_mse(est, measured_list, truth_list) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        pairs = [(rollout(est, m), c) for m, c in zip(measured_list, truth_list)]
        mse = evaluate_many(pairs).aggregate
    return float(mse) if np.isfinite(mse) else float("inf")


@pytest.fixture(scope="session")
def toy_benchmark_runs():
    """Trained toy-preset comparison for seeds 0..2 (several minutes).

    Per seed: EDMD-only, RL-only, and hybrid closed-loop test MSE plus the
    hybrid training history and the total wall time.
    """
    config = cfgmod.resolve_config("toy")
    runs = {}
    t0 = time.perf_counter()
    for seed in (0, 1, 2):
        c = dataclasses.replace(config, seed=seed)
        _, measured = cfgmod.train_data(c, seed)
        model, dataset = cfgmod.fit_from_trajectories(c, measured)
        test_clean, test_measured = cfgmod.test_data(c, seed)
        tc = cfgmod.train_config(c)
        hybrid_est, _, history = train_hybrid(model, measured, tc, dataset=dataset)
        rl_est, _, _ = rl_only_baseline(measured, tc)
        runs[seed] = {
            "edmd_mse": _closed_loop_mse(
                HybridEstimator(model=model, actor=None), test_measured, test_clean
            ),
            "rl_mse": _closed_loop_mse(rl_est, test_measured, test_clean),
            "hybrid_mse": _closed_loop_mse(hybrid_est, test_measured, test_clean),
            "history": history,
        }
    runs["wall_seconds"] = time.perf_counter() - t0
    return runs
