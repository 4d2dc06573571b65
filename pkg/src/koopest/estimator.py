"""Hybrid estimators: linear lifted prediction plus a learned correction.

One estimator step from estimate x_hat with measurement x_meas available:

    psi      = U^T Psi(x_hat)
    psi_next = A_r psi + a(x_meas, x_hat)
    x_next   = identity-prefix of U psi_next

With the action term absent this is the plain reduced linear predictor,
which never ingests measurements during a rollout (pure open loop). The
learned actor closes the loop through the measurement half of its input.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from . import ddpg
from .approximator import Mlp, forward
from .ddpg import Agent, TrainConfig, TrainingHistory
from .dictionary import lift_matrix
from .dynamics import DynamicalSystem, SnapshotDataset, Trajectory, rk4_step
from .edmd import KoopmanModel, project, reconstruct_state

# maps the concatenated (measured, estimated) vector to an action
ActorFn = Callable[[np.ndarray], np.ndarray]
ActorLike = Union[Mlp, ActorFn, None]


def call_actor(actor: ActorLike, vec: np.ndarray) -> np.ndarray:
    if isinstance(actor, Mlp):
        return forward(actor, vec)
    return actor(vec)  # type: ignore[misc]


@dataclass
class HybridEstimator:
    """Reduced linear predictor with an optional residual-correcting actor."""

    model: KoopmanModel
    actor: ActorLike = None

    def __post_init__(self) -> None:
        if isinstance(self.actor, Mlp):
            if self.actor.in_dim != 2 * self.model.n:
                raise ValueError(
                    f"actor input dim {self.actor.in_dim} != 2n = {2 * self.model.n}"
                )
            if self.actor.out_dim != self.model.r:
                raise ValueError(
                    f"actor output dim {self.actor.out_dim} != r = {self.model.r}"
                )

    def predict_next(self, x_hat: np.ndarray, x_meas: np.ndarray) -> np.ndarray:
        psi_next = self.model.A_r @ project(self.model, x_hat)
        if self.actor is not None:
            psi_next = psi_next + call_actor(
                self.actor, np.concatenate([x_meas, x_hat])
            )
        return reconstruct_state(self.model, psi_next)


@dataclass
class DirectEstimator:
    """Model-free baseline: the action *is* the next state estimate."""

    actor: ActorLike

    def predict_next(self, x_hat: np.ndarray, x_meas: np.ndarray) -> np.ndarray:
        return call_actor(self.actor, np.concatenate([x_meas, x_hat]))


class KoopmanResidualEnv:
    """Training environment wrapping one estimator step.

    operator defaults to the model's A_r; action_map, when given, is applied
    to the raw action before it enters the lifted update (used when a
    policy trained in other coordinates is composed with transfer maps).

    clip_box, when given, clamps each entry of the next estimate to
    [-clip_box[i], clip_box[i]] during training steps. The polynomial lift
    extrapolates explosively outside the sampled region, so an untrained
    exploring policy can otherwise launch the estimate to overflow within
    a few steps. Deployed estimators never clip.
    """

    def __init__(
        self,
        model: KoopmanModel,
        operator: np.ndarray | None = None,
        action_map: np.ndarray | None = None,
        clip_box: np.ndarray | None = None,
        noise_map: np.ndarray | None = None,
    ):
        self.model = model
        self.operator = model.A_r if operator is None else operator
        self.action_map = action_map
        self.clip_box = None if clip_box is None else np.asarray(clip_box, float)
        self.noise_map = noise_map
        self.state_dim = model.n
        self.action_dim = model.r

    def step(self, x_hat: np.ndarray, action: np.ndarray) -> np.ndarray:
        a = action if self.action_map is None else self.action_map @ action
        psi_next = self.operator @ project(self.model, x_hat) + a
        x_next = reconstruct_state(self.model, psi_next)
        if self.clip_box is not None:
            x_next = np.clip(x_next, -self.clip_box, self.clip_box)
        return x_next


class DirectEnv:
    """Environment for the model-free baseline: next estimate = action."""

    def __init__(self, n: int):
        self.state_dim = n
        self.action_dim = n

    def step(self, x_hat: np.ndarray, action: np.ndarray) -> np.ndarray:
        return np.asarray(action, dtype=np.float64).copy()


def predict_next(est, x_hat: np.ndarray, x_meas: np.ndarray) -> np.ndarray:
    return est.predict_next(x_hat, x_meas)


def rollout(est, measured: Trajectory, use_measurements: bool = True) -> Trajectory:
    """Run the estimator along a measured trajectory from its first state.

    With use_measurements off the actor sees the estimate in place of the
    measurement (open-loop diagnostics); the actorless estimator is open
    loop either way.
    """
    states = np.empty_like(measured.states)
    states[0] = measured.states[0]
    for k in range(measured.steps):
        feed = measured.states[k] if use_measurements else states[k]
        states[k + 1] = est.predict_next(states[k], feed)
    return Trajectory(dt=measured.dt, states=states)


@dataclass
class EvalReport:
    """Squared-error summary; per-entry normalization, start state excluded."""

    per_trajectory: list[float]
    aggregate: float
    normalization: str = "mean over steps and entries of squared error; step 0 excluded"
    wall_seconds: float = 0.0


def evaluate_mse(estimates: Trajectory, truth: Trajectory) -> EvalReport:
    if estimates.states.shape != truth.states.shape:
        raise ValueError(
            f"shape mismatch {estimates.states.shape} vs {truth.states.shape}"
        )
    if estimates.steps < 1:
        raise ValueError("need at least one step beyond the initial state")
    err = estimates.states[1:] - truth.states[1:]
    mse = float(np.mean(err**2))
    return EvalReport(per_trajectory=[mse], aggregate=mse)


def evaluate_many(pairs: list[tuple[Trajectory, Trajectory]]) -> EvalReport:
    """Pooled report over several (estimate, truth) rollout pairs."""
    if not pairs:
        raise ValueError("no rollout pairs to evaluate")
    per, total, count = [], 0.0, 0
    for est_traj, truth_traj in pairs:
        rep = evaluate_mse(est_traj, truth_traj)
        per.append(rep.aggregate)
        size = est_traj.steps * est_traj.n
        total += rep.aggregate * size
        count += size
    return EvalReport(per_trajectory=per, aggregate=total / count)


def residual_actions(model: KoopmanModel, dataset: SnapshotDataset) -> np.ndarray:
    """Ideal corrections on the snapshot pairs: U^T Psi(y) - A_r U^T Psi(x).

    These are the actions that would make the one-step lifted update exact
    on the training data; their spread sets a natural action magnitude.
    """
    psi_x = model.U.T @ lift_matrix(model.dictionary, dataset.x)
    psi_y = model.U.T @ lift_matrix(model.dictionary, dataset.y)
    return (psi_y - model.A_r @ psi_x).T


def state_residual_spread(model: KoopmanModel, dataset: SnapshotDataset) -> np.ndarray:
    """Per state entry, the 99th percentile one-step error of the bare
    linear model on the snapshot pairs, with 20% headroom. This is the
    correction budget the policy actually needs at the state level."""
    pu = model.U[: model.n, :]
    psi_x = model.U.T @ lift_matrix(model.dictionary, dataset.x)
    resid_state = dataset.y - (pu @ (model.A_r @ psi_x)).T
    q = np.quantile(np.abs(resid_state), 0.99, axis=0)
    return np.maximum(1.2 * q, 1e-9)


def closed_loop_drift(
    model: KoopmanModel, trajectories: list[Trajectory], limit: int = 3
) -> np.ndarray | None:
    """Per state entry, the 99th percentile deviation of the bare model's
    closed-loop rollout from the measurements over a few training
    trajectories. None when the bare rollout diverges."""
    bare = HybridEstimator(model=model, actor=None)
    devs = []
    with np.errstate(over="ignore", invalid="ignore"):
        for t in trajectories[:limit]:
            ro = rollout(bare, t)
            d = np.abs(ro.states[1:] - t.states[1:])
            if not np.all(np.isfinite(d)):
                return None
            devs.append(d)
    return np.quantile(np.vstack(devs), 0.99, axis=0)


def correction_budget(
    model: KoopmanModel,
    trajectories: list[Trajectory],
    dataset: SnapshotDataset,
) -> np.ndarray:
    """Per state entry, how far the policy must be able to move the estimate.

    Two error channels need covering: the model's one-step residual on the
    snapshot pairs, and the drift its rollout accumulates over a whole
    trajectory. On contracting systems the two are comparable, but around
    a limit cycle phase error compounds far beyond the one-step residual,
    and a budget sized only by the latter forbids the policy from pulling
    a drifted estimate back onto the measured orbit. The budget is capped
    at the per-entry data extent so a divergent bare model cannot inflate
    it without bound.
    """
    spread = state_residual_spread(model, dataset)
    extent = np.max(np.abs(np.vstack([t.states for t in trajectories])), axis=0)
    drift = closed_loop_drift(model, trajectories)
    if drift is None:
        drift = extent
    return np.minimum(np.maximum(spread, 1.2 * drift), np.maximum(extent, 1e-9))


def auto_action_scale(model: KoopmanModel, kappa: np.ndarray) -> np.ndarray:
    """Per-entry action bound realizing state corrections of size kappa.

    Only PU of the action reaches the estimate, so the bound must satisfy
    two state-level constraints at once: minimum-norm actions realizing any
    state correction within the budget must fit inside the box, and no
    corner of the box may move the state by much more than that budget.
    c = |pinv(PU)| kappa gives the first exactly and keeps the second
    within a factor ||PU| c| / kappa, modest in practice. Bounds from the
    lifted-residual distribution instead let a single saturated entry
    throw the estimate off the data region entirely.
    """
    pu = model.U[: model.n, :]
    c = np.abs(np.linalg.pinv(pu)) @ np.asarray(kappa, float)
    return np.maximum(c, 1e-9)


def exploration_map(model: KoopmanModel, kappa: np.ndarray) -> np.ndarray:
    """Matrix turning unit noise into actions with budget-sized state effect.

    The estimator recursion only consumes PU of the action, so independent
    per-entry action noise produces state kicks of order ||PU diag(scale)||,
    which for wide dictionaries dwarfs the state itself. Mapping
    state-space noise through pinv(PU), scaled per state entry by the
    correction budget, keeps exploration commensurate with the errors the
    policy has to correct.
    """
    pu = model.U[: model.n, :]
    return np.linalg.pinv(pu) * np.asarray(kappa, float)[np.newaxis, :]


def make_oracle_actor(
    model: KoopmanModel, system: DynamicalSystem, dt: float
) -> ActorFn:
    """Analytic residual action: U^T Psi(F(x_meas)) - A_r U^T Psi(x_hat)."""

    n = model.n

    def actor(vec: np.ndarray) -> np.ndarray:
        x_meas, x_hat = vec[:n], vec[n:]
        x_next = rk4_step(system, x_meas, dt)
        return project(model, x_next) - model.A_r @ project(model, x_hat)

    return actor


def deployment_validator(make_est, trajectories: list[Trajectory], limit: int = 3):
    """Score an agent by its noise-free closed-loop error on training data.

    Exploration noise and one-step rewards say little about how the
    deployed policy tracks over a full trajectory, so checkpoint selection
    rolls the current actor (no noise) over a few training trajectories
    and scores the negated squared error against the measurements. Only
    training data is touched; the subset is taken from the tail of the
    list because episodes replay it from the front, so with fewer episodes
    than trajectories the scoring trajectories were never replayed. A
    diverged rollout scores -inf.
    """
    subset = trajectories[-limit:]

    def score(agent: Agent) -> float:
        est = make_est(agent)
        total, count = 0.0, 0
        with np.errstate(over="ignore", invalid="ignore"):
            for t in subset:
                ro = rollout(est, t)
                err = ro.states[1:] - t.states[1:]
                if not np.all(np.isfinite(err)):
                    return -np.inf
                total += float(np.sum(err**2))
                count += err.size
        return -total / count

    return score


def train_hybrid(
    model: KoopmanModel,
    trajectories: list[Trajectory],
    config: TrainConfig,
    dataset: SnapshotDataset | None = None,
) -> tuple[HybridEstimator, Agent, TrainingHistory]:
    """Train the correction policy for a fitted model on measured data."""
    from .dynamics import build_snapshot_dataset

    if dataset is None:
        dataset = build_snapshot_dataset(trajectories)
    kappa = correction_budget(model, trajectories, dataset)
    if isinstance(config.action_scale, str):
        scale: float | np.ndarray = auto_action_scale(model, kappa)
    else:
        scale = float(config.action_scale)
    # training-only estimate clamp just beyond the per-entry data extent
    box = 1.2 * np.max(np.abs(np.vstack([t.states for t in trajectories])), axis=0)
    env = KoopmanResidualEnv(
        model, clip_box=box, noise_map=exploration_map(model, kappa)
    )
    agent = ddpg.init_agent(2 * model.n, model.r, config, scale)
    validate = deployment_validator(
        lambda ag: HybridEstimator(model=model, actor=ag.actor), trajectories
    )
    agent, history = ddpg.train(agent, env, trajectories, config, validate=validate)
    return HybridEstimator(model=model, actor=agent.actor), agent, history


def rl_only_baseline(
    trajectories: list[Trajectory],
    config: TrainConfig,
) -> tuple[DirectEstimator, Agent, TrainingHistory]:
    """Same training budget and architecture, no linear model underneath.

    The action is the next state estimate itself, so the tanh bound must
    cover the state range; "auto" derives it from the data.
    """
    n = trajectories[0].n
    if isinstance(config.action_scale, str):
        peak = np.max(np.abs(np.vstack([t.states for t in trajectories])), axis=0)
        scale: float | np.ndarray = np.maximum(1.2 * peak, 1e-9)
    else:
        scale = float(config.action_scale)
    env = DirectEnv(n)
    agent = ddpg.init_agent(2 * n, n, config, scale)
    validate = deployment_validator(
        lambda ag: DirectEstimator(actor=ag.actor), trajectories
    )
    agent, history = ddpg.train(agent, env, trajectories, config, validate=validate)
    return DirectEstimator(actor=agent.actor), agent, history


def timed_rollouts(
    est, measured_list: list[Trajectory], truth_list: list[Trajectory],
    use_measurements: bool = True,
) -> EvalReport:
    """Rollouts against ground truth for each measured trajectory."""
    t0 = time.perf_counter()
    pairs = []
    for measured, truth in zip(measured_list, truth_list):
        pairs.append((rollout(est, measured, use_measurements), truth))
    report = evaluate_many(pairs)
    report.wall_seconds = time.perf_counter() - t0
    return report
