import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import example1_dictionary
from koopest.approximator import Mlp, init_mlp
from koopest.ddpg import TrainConfig
from koopest.dictionary import build_dictionary
from koopest.dynamics import (
    Disk,
    ToySystem,
    Trajectory,
    build_snapshot_dataset,
    rk4_step,
    sample_initial_conditions,
    simulate,
)
from koopest.edmd import KoopmanModel
from koopest.estimator import (
    DirectEnv,
    DirectEstimator,
    HybridEstimator,
    KoopmanResidualEnv,
    auto_action_scale,
    closed_loop_drift,
    correction_budget,
    deployment_validator,
    evaluate_many,
    evaluate_mse,
    exploration_map,
    make_oracle_actor,
    residual_actions,
    rl_only_baseline,
    rollout,
    state_residual_spread,
    timed_rollouts,
    train_hybrid,
)


def _identity_model(factor=0.5):
    """n = N = r = 2 model whose bare step is x -> factor * x."""
    d = build_dictionary(2, 1)
    return KoopmanModel(
        dictionary=d,
        U=np.eye(2),
        sigma=np.array([2.0, 1.0]),
        A_r=factor * np.eye(2),
        r=2,
    )


def _toy_measured(steps=20, x0=(1.0, 1.0)):
    return simulate(ToySystem(), np.array(x0), 0.1, steps)


def test_zero_actor_matches_bare_model(example1_model):
    measured = _toy_measured()
    bare = rollout(HybridEstimator(model=example1_model, actor=None), measured)
    zeroed = rollout(
        HybridEstimator(model=example1_model, actor=lambda v: np.zeros(3)), measured
    )
    np.testing.assert_array_equal(bare.states, zeroed.states)


def test_identity_model_rollout_is_matrix_power():
    model = _identity_model(0.5)
    measured = Trajectory(dt=0.1, states=np.tile([2.0, -4.0], (6, 1)))
    ro = rollout(HybridEstimator(model=model, actor=None), measured)
    for k in range(6):
        np.testing.assert_allclose(ro.states[k], 0.5**k * np.array([2.0, -4.0]), atol=1e-14)


def test_oracle_actor_closes_one_step(example1_model):
    actor = make_oracle_actor(example1_model, ToySystem(), 0.1)
    est = HybridEstimator(model=example1_model, actor=actor)
    for x in [np.array([1.0, 1.0]), np.array([-2.0, 3.0]), np.array([0.5, -0.5])]:
        pred = est.predict_next(x, x)
        np.testing.assert_allclose(pred, rk4_step(ToySystem(), x, 0.1), atol=1e-10)


def test_oracle_actor_tracks_whole_trajectory(example1_model):
    measured = _toy_measured(steps=50, x0=(3.0, -1.0))
    actor = make_oracle_actor(example1_model, ToySystem(), 0.1)
    ro = rollout(HybridEstimator(model=example1_model, actor=actor), measured)
    assert np.max(np.abs(ro.states - measured.states)) < 1e-9


def test_rollout_feed_semantics():
    model = _identity_model(0.5)
    # actor echoes the fed "measurement" half of its input
    est = HybridEstimator(model=model, actor=lambda vec: vec[:2].copy())
    measured = Trajectory(dt=0.1, states=np.tile([1.0, 1.0], (4, 1)))
    closed = rollout(est, measured, use_measurements=True)
    x = np.array([1.0, 1.0])
    for k in range(3):
        np.testing.assert_allclose(closed.states[k + 1], 0.5 * closed.states[k] + x)
    open_loop = rollout(est, measured, use_measurements=False)
    for k in range(3):
        np.testing.assert_allclose(open_loop.states[k + 1], 1.5 * open_loop.states[k])


def test_rollout_zero_steps():
    model = _identity_model()
    measured = Trajectory(dt=0.1, states=np.array([[1.0, 2.0]]))
    ro = rollout(HybridEstimator(model=model, actor=None), measured)
    np.testing.assert_array_equal(ro.states, measured.states)


def test_actor_dimension_validation(example1_model):
    with pytest.raises(ValueError):
        HybridEstimator(model=example1_model, actor=init_mlp((3, 4, 3)))
    with pytest.raises(ValueError):
        HybridEstimator(model=example1_model, actor=init_mlp((4, 4, 2)))


def test_evaluate_mse_values():
    truth = Trajectory(dt=0.1, states=np.zeros((4, 2)))
    perfect = evaluate_mse(truth, truth)
    assert perfect.aggregate == 0.0
    shifted = Trajectory(dt=0.1, states=truth.states + np.array([1.0, 0.0]))
    assert evaluate_mse(shifted, truth).aggregate == 0.5


def test_evaluate_mse_excludes_start():
    truth = Trajectory(dt=0.1, states=np.zeros((3, 1)))
    est = Trajectory(dt=0.1, states=np.array([[100.0], [0.0], [0.0]]))
    assert evaluate_mse(est, truth).aggregate == 0.0


def test_evaluate_mse_errors():
    a = Trajectory(dt=0.1, states=np.zeros((3, 2)))
    b = Trajectory(dt=0.1, states=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        evaluate_mse(a, b)
    single = Trajectory(dt=0.1, states=np.zeros((1, 2)))
    with pytest.raises(ValueError):
        evaluate_mse(single, single)


def test_evaluate_many_pools_by_sample_count():
    zero1 = Trajectory(dt=0.1, states=np.zeros((2, 1)))
    off1 = Trajectory(dt=0.1, states=np.array([[0.0], [1.0]]))
    zero3 = Trajectory(dt=0.1, states=np.zeros((4, 1)))
    report = evaluate_many([(off1, zero1), (zero3, zero3)])
    assert report.per_trajectory == [1.0, 0.0]
    # 1 erroring sample against 3 clean ones
    assert abs(report.aggregate - 0.25) < 1e-15
    with pytest.raises(ValueError):
        evaluate_many([])


def test_env_clips_only_during_training():
    model = _identity_model(0.5)
    env = KoopmanResidualEnv(model, clip_box=np.array([1.0, 1.0]))
    big_action = np.array([10.0, 10.0])
    clipped = env.step(np.array([1.0, 1.0]), big_action)
    np.testing.assert_array_equal(clipped, [1.0, 1.0])
    est = HybridEstimator(model=model, actor=lambda v: big_action)
    deployed = est.predict_next(np.array([1.0, 1.0]), np.array([1.0, 1.0]))
    np.testing.assert_allclose(deployed, [10.5, 10.5])


def test_env_action_map_reroutes_action():
    model = _identity_model(0.5)
    M = np.array([[0.0, 1.0], [1.0, 0.0]])
    env = KoopmanResidualEnv(model, action_map=M)
    out = env.step(np.array([0.0, 0.0]), np.array([1.0, 2.0]))
    np.testing.assert_allclose(out, [2.0, 1.0])


def test_direct_env_returns_action_copy():
    env = DirectEnv(2)
    action = np.array([1.0, 2.0])
    out = env.step(np.array([0.0, 0.0]), action)
    out[0] = 99.0
    assert action[0] == 1.0


def test_auto_scale_and_exploration_identity_model():
    model = _identity_model()
    kappa = np.array([0.3, 0.7])
    np.testing.assert_allclose(auto_action_scale(model, kappa), kappa)
    np.testing.assert_allclose(exploration_map(model, kappa), np.diag(kappa))


def test_residuals_vanish_for_exact_model():
    model = _identity_model(0.5)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 2))
    dataset = build_snapshot_dataset(
        [Trajectory(dt=0.1, states=np.vstack([xi, 0.5 * xi])) for xi in x]
    )
    np.testing.assert_allclose(residual_actions(model, dataset), 0.0, atol=1e-14)
    np.testing.assert_array_equal(state_residual_spread(model, dataset), 1e-9)


def test_correction_budget_capped_by_data_extent():
    model = _identity_model(2.0)  # expanding bare model, drifts hard
    trajectories = [_toy_measured(steps=10, x0=(2.0, 1.0))]
    dataset = build_snapshot_dataset(trajectories)
    budget = correction_budget(model, trajectories, dataset)
    extent = np.max(np.abs(trajectories[0].states), axis=0)
    assert np.all(budget <= extent + 1e-12)
    assert closed_loop_drift(model, trajectories) is not None


def test_deployment_validator_scores():
    const = Trajectory(dt=0.1, states=np.tile([1.0, -2.0], (8, 1)))

    class Echo:
        def predict_next(self, x_hat, x_meas):
            return x_meas.copy()

    class Diverge:
        def predict_next(self, x_hat, x_meas):
            return np.full(2, np.inf)

    score_perfect = deployment_validator(lambda agent: Echo(), [const])
    assert score_perfect(None) == 0.0
    score_bad = deployment_validator(lambda agent: Diverge(), [const])
    assert score_bad(None) == -np.inf


@given(
    st.lists(st.floats(min_value=-3.0, max_value=3.0, allow_nan=False), min_size=7, max_size=7)
)
def test_correction_enters_through_retained_basis(example1_model, values):
    # hybrid minus bare one-step difference is exactly PU a
    vals = np.array(values)
    x_hat, x_meas, action = vals[:2], vals[2:4], vals[4:]
    bare = HybridEstimator(model=example1_model, actor=None)
    hybrid = HybridEstimator(model=example1_model, actor=lambda v: action)
    diff = hybrid.predict_next(x_hat, x_meas) - bare.predict_next(x_hat, x_meas)
    np.testing.assert_allclose(diff, example1_model.U[:2] @ action, atol=1e-12)


def _tiny_training_setup():
    ics = sample_initial_conditions(Disk(2.0), 3, seed=1)
    trajectories = [simulate(ToySystem(), x0, 0.1, 15) for x0 in ics]
    config = TrainConfig(
        episodes=2, batch_size=16, hidden_width=16, buffer_capacity=200,
        actor_warmup=5, seed=0, keep_best=True,
    )
    return trajectories, config


def test_train_hybrid_smoke():
    trajectories, config = _tiny_training_setup()
    from koopest.dictionary import lift_matrix
    from koopest.edmd import RankPolicy, fit_reduced

    d = build_dictionary(2, 2)
    dataset = build_snapshot_dataset(trajectories)
    model = fit_reduced(
        lift_matrix(d, dataset.x), lift_matrix(d, dataset.y), d, RankPolicy.energy(1.0)
    )
    est, agent, history = train_hybrid(model, trajectories, config, dataset=dataset)
    assert isinstance(est.actor, Mlp)
    assert agent.actor.out_dim == model.r
    assert agent.actor.in_dim == 4
    assert len(history.episode_rewards) == 2
    pred = est.predict_next(np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    assert pred.shape == (2,) and np.all(np.isfinite(pred))


def test_rl_baseline_smoke():
    trajectories, config = _tiny_training_setup()
    est, agent, history = rl_only_baseline(trajectories, config)
    assert isinstance(est, DirectEstimator)
    assert agent.actor.out_dim == 2
    assert len(history.episode_rewards) == 2
    pred = est.predict_next(np.array([0.1, 0.1]), np.array([0.1, 0.1]))
    assert pred.shape == (2,)


def test_timed_rollouts_reports_wall(example1_model):
    measured = [_toy_measured(steps=10), _toy_measured(steps=10, x0=(2.0, 0.5))]
    est = HybridEstimator(model=example1_model, actor=None)
    report = timed_rollouts(est, measured, measured)
    assert report.wall_seconds > 0.0
    assert len(report.per_trajectory) == 2
    assert report.aggregate < 1e-4
