"""Carrying a trained estimator across a smooth change of coordinates.

For an invertible smooth map z = h(x) with smooth inverse, two small
least-squares problems connect the source estimator to the new
coordinates: O1 aligns reduced lifted coordinates of x-states with those
of their images h(x), and O2 aligns the trained actor's outputs on
x-inputs with its outputs evaluated directly on z-inputs. The transferred
predictor then runs entirely in z:

    psi_next = pinv(O1) A_r O1 psi + pinv(O1) O2 a(z_meas, z_hat)

The exact pull-back predictor (inverse-map, predict, forward-map) is the
reference construction; its one-step squared error is bounded by K * eps,
where K is a squared-distance Lipschitz constant of h on the domain and
eps bounds the actor's squared deviation from the ideal residual action.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import ddpg
from .approximator import Mlp, clone, forward
from .ddpg import Agent, TrainConfig, TrainingHistory
from .dictionary import lift_matrix
from .dynamics import DynamicalSystem, Trajectory, rk4_step
from .edmd import PINV_RCOND, KoopmanModel, project, reconstruct_state
from .estimator import (
    ActorLike,
    HybridEstimator,
    KoopmanResidualEnv,
    call_actor,
    rollout,
)


class InversionError(RuntimeError):
    pass


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass
class Diffeomorphism:
    """Invertible coordinate change with a declared bounded domain."""

    kind: str
    forward_map: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    inverse_map: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    domain_radius: float = 10.0
    params: dict = field(default_factory=dict)
    lipschitz_estimate: float | None = None


def apply_h(d: Diffeomorphism, x: np.ndarray) -> np.ndarray:
    """h applied along the last axis; accepts (n,) or (count, n)."""
    return d.forward_map(np.asarray(x, dtype=np.float64))


def apply_h_inverse(d: Diffeomorphism, z: np.ndarray) -> np.ndarray:
    return d.inverse_map(np.asarray(z, dtype=np.float64))


def map_trajectory(d: Diffeomorphism, traj: Trajectory) -> Trajectory:
    return Trajectory(dt=traj.dt, states=apply_h(d, traj.states))


def _solve_increasing_cubic(z: np.ndarray) -> np.ndarray:
    """Unique real root of x^3 + x = z, elementwise.

    Cardano in the cancellation-free form u - 1/(3u) with u > 0, then two
    Newton polish steps to machine precision.
    """
    z = np.asarray(z, dtype=np.float64)
    az = np.abs(z)
    u = np.cbrt(0.5 * az + np.sqrt(0.25 * az**2 + 1.0 / 27.0))
    x = u - 1.0 / (3.0 * u)
    for _ in range(2):
        x = x - (x**3 + x - az) / (3.0 * x**2 + 1.0)
    return np.sign(z) * x


def newton_invert_monotone(
    f: Callable[[float], float],
    df: Callable[[float], float],
    target: float,
    lo: float,
    hi: float,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> float:
    """Bisection-safeguarded Newton for increasing scalar f on [lo, hi]."""
    a, b = float(lo), float(hi)
    x = 0.5 * (a + b)
    for _ in range(max_iter):
        fx = f(x) - target
        if abs(fx) <= tol * max(1.0, abs(target)):
            return x
        if fx > 0:
            b = x
        else:
            a = x
        d = df(x)
        x_new = x - fx / d if d > 0 else 0.5 * (a + b)
        if not a < x_new < b:
            x_new = 0.5 * (a + b)
        x = x_new
    raise InversionError(
        f"no convergence to f(x) = {target} within {max_iter} iterations"
    )


def identity_diffeo(domain_radius: float = 10.0) -> Diffeomorphism:
    return Diffeomorphism(
        kind="identity",
        forward_map=lambda x: np.array(x, dtype=np.float64, copy=True),
        inverse_map=lambda z: np.array(z, dtype=np.float64, copy=True),
        domain_radius=domain_radius,
    )


def scaling_diffeo(factor: float, domain_radius: float = 10.0) -> Diffeomorphism:
    if factor == 0:
        raise ValueError("scaling factor must be nonzero")
    return Diffeomorphism(
        kind="scaling",
        forward_map=lambda x: factor * np.asarray(x, dtype=np.float64),
        inverse_map=lambda z: np.asarray(z, dtype=np.float64) / factor,
        domain_radius=domain_radius,
        params={"factor": factor},
    )


def cubic_expand_double(domain_radius: float = 10.0) -> Diffeomorphism:
    """z = (x1^3 + x1, 2 x2); strictly monotone in each coordinate."""

    def fwd(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.empty_like(x)
        out[..., 0] = x[..., 0] ** 3 + x[..., 0]
        out[..., 1] = 2.0 * x[..., 1]
        return out

    def inv(z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        out = np.empty_like(z)
        out[..., 0] = _solve_increasing_cubic(z[..., 0])
        out[..., 1] = 0.5 * z[..., 1]
        return out

    return Diffeomorphism(
        kind="cubic_expand_double",
        forward_map=fwd,
        inverse_map=inv,
        domain_radius=domain_radius,
    )


_BUILDERS = {
    "identity": identity_diffeo,
    "scaling": scaling_diffeo,
    "cubic_expand_double": cubic_expand_double,
}


def make_diffeo(kind: str, domain_radius: float = 10.0, **params) -> Diffeomorphism:
    if kind not in _BUILDERS:
        raise ValueError(f"unknown diffeomorphism kind {kind!r}")
    return _BUILDERS[kind](domain_radius=domain_radius, **params)


def estimate_lipschitz(
    d: Diffeomorphism,
    n_pairs: int = 100_000,
    seed: int = 0,
    safety: float = 1.1,
    close_pairs: int = 10_000,
) -> float:
    """Sampled squared-distance expansion bound for h on its domain.

    Maximizes ||h(x) - h(y)||^2 / ||x - y||^2 over random pairs in the
    domain disk plus nearly-coincident pairs (which probe the local
    derivative, where the ratio peaks for the maps used here), inflated by
    the safety factor.
    """
    rng = np.random.default_rng(seed)

    def draw(count: int) -> np.ndarray:
        r = d.domain_radius * np.sqrt(rng.uniform(size=count))
        th = rng.uniform(0.0, 2.0 * np.pi, size=count)
        return np.column_stack([r * np.cos(th), r * np.sin(th)])

    x, y = draw(n_pairs), draw(n_pairs)
    num = np.sum((apply_h(d, x) - apply_h(d, y)) ** 2, axis=1)
    den = np.sum((x - y) ** 2, axis=1)
    keep = den > 1e-24
    best = float(np.max(num[keep] / den[keep]))
    xc = draw(close_pairs)
    th = rng.uniform(0.0, 2.0 * np.pi, size=close_pairs)
    step = 1e-6 * np.column_stack([np.cos(th), np.sin(th)])
    yc = xc + step
    num = np.sum((apply_h(d, xc) - apply_h(d, yc)) ** 2, axis=1)
    den = np.sum(step**2, axis=1)
    best = max(best, float(np.max(num / den)))
    return safety * best


def with_lipschitz(d: Diffeomorphism, **kwargs) -> Diffeomorphism:
    return replace(d, lipschitz_estimate=estimate_lipschitz(d, **kwargs))


@dataclass
class TransferMaps:
    """O1 (lifted-coordinate alignment) and O2 (action alignment), with the
    relative Frobenius residuals of their fits."""

    O1: np.ndarray
    O2: np.ndarray
    o1_residual: float
    o2_residual: float


def _lstsq_map(targets: np.ndarray, sources: np.ndarray, label: str) -> tuple[np.ndarray, float]:
    """Minimum-norm O with targets ~= O sources (columns are samples)."""
    O = targets @ np.linalg.pinv(sources, rcond=PINV_RCOND)
    denom = max(float(np.linalg.norm(targets)), 1e-300)
    residual = float(np.linalg.norm(targets - O @ sources)) / denom
    s = np.linalg.svd(sources, compute_uv=False)
    rank = int(np.sum(s > PINV_RCOND * s[0])) if s.size and s[0] > 0 else 0
    if rank < sources.shape[0]:
        warnings.warn(
            f"{label}: source matrix rank {rank} < {sources.shape[0]}; "
            f"fit residual {residual:.3e}",
            RankDeficiencyWarning,
        )
    return O, residual


def fit_O1(
    model: KoopmanModel, states: np.ndarray, d: Diffeomorphism
) -> tuple[np.ndarray, float]:
    """Least-squares O1 with U^T Psi(x) ~= O1 U^T Psi(h(x)) over samples."""
    states = np.asarray(states, dtype=np.float64)
    targets = model.U.T @ lift_matrix(model.dictionary, states)
    sources = model.U.T @ lift_matrix(model.dictionary, apply_h(d, states))
    return _lstsq_map(targets, sources, "fit_O1")


def _actor_batch(actor: ActorLike, vecs: np.ndarray) -> np.ndarray:
    if isinstance(actor, Mlp):
        return forward(actor, vecs)
    return np.stack([np.asarray(actor(v)) for v in vecs])


def fit_O2(
    actor: ActorLike,
    x_meas: np.ndarray,
    x_hat: np.ndarray,
    d: Diffeomorphism,
) -> tuple[np.ndarray, float]:
    """Least-squares O2 aligning a(x pairs) with a evaluated on h(pairs).

    Pairs whose estimate left the representable range (a diverged source
    rollout, or h overflowing on it) are dropped with a warning rather
    than poisoning the regression.
    """
    x_meas = np.asarray(x_meas, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        targets = _actor_batch(actor, np.hstack([x_meas, x_hat])).T
        sources = _actor_batch(
            actor, np.hstack([apply_h(d, x_meas), apply_h(d, x_hat)])
        ).T
    keep = np.all(np.isfinite(targets), axis=0) & np.all(
        np.isfinite(sources), axis=0
    )
    if not np.all(keep):
        warnings.warn(
            f"fit_O2: dropped {int(np.sum(~keep))} of {keep.size} pairs with "
            "non-finite actor evaluations",
            RankDeficiencyWarning,
        )
        targets, sources = targets[:, keep], sources[:, keep]
    if targets.shape[1] == 0:
        raise ValueError("fit_O2: no finite actor pairs to fit")
    return _lstsq_map(targets, sources, "fit_O2")


def collect_actor_pairs(
    est: HybridEstimator, trajectories: list[Trajectory]
) -> tuple[np.ndarray, np.ndarray]:
    """(measurement, estimate) inputs the actor sees along closed-loop
    rollouts of the measured trajectories."""
    meas_rows, hat_rows = [], []
    for traj in trajectories:
        est_traj = rollout(est, traj)
        meas_rows.append(traj.states[:-1])
        hat_rows.append(est_traj.states[:-1])
    return np.vstack(meas_rows), np.vstack(hat_rows)


def fit_transfer_maps(
    model: KoopmanModel,
    actor: ActorLike,
    trajectories: list[Trajectory],
    d: Diffeomorphism,
) -> TransferMaps:
    """Fit both maps from the stored source trajectories."""
    states = np.vstack([t.states[:-1] for t in trajectories])
    O1, r1 = fit_O1(model, states, d)
    x_meas, x_hat = collect_actor_pairs(HybridEstimator(model, actor), trajectories)
    O2, r2 = fit_O2(actor, x_meas, x_hat, d)
    return TransferMaps(O1=O1, O2=O2, o1_residual=r1, o2_residual=r2)


@dataclass
class TransferredEstimator:
    """Source model and actor recombined to predict in z-coordinates.

    composed_operator and action_map are cached products; rebuild through
    build_transferred whenever the maps change.
    """

    model: KoopmanModel
    actor: ActorLike
    maps: TransferMaps
    composed_operator: np.ndarray
    action_map: np.ndarray

    def predict_next(self, z_hat: np.ndarray, z_meas: np.ndarray) -> np.ndarray:
        psi_next = self.composed_operator @ project(self.model, z_hat)
        if self.actor is not None:
            psi_next = psi_next + self.action_map @ call_actor(
                self.actor, np.concatenate([z_meas, z_hat])
            )
        return reconstruct_state(self.model, psi_next)


def build_transferred(
    model: KoopmanModel, actor: ActorLike, maps: TransferMaps
) -> TransferredEstimator:
    O1_pinv = np.linalg.pinv(maps.O1, rcond=PINV_RCOND)
    return TransferredEstimator(
        model=model,
        actor=actor,
        maps=maps,
        composed_operator=O1_pinv @ model.A_r @ maps.O1,
        action_map=O1_pinv @ maps.O2,
    )


def transferred_predict(
    te: TransferredEstimator, z_hat: np.ndarray, z_meas: np.ndarray
) -> np.ndarray:
    return te.predict_next(z_hat, z_meas)


@dataclass
class ExactTransferEstimator:
    """Reference pull-back: invert h, run the source estimator, map back."""

    model: KoopmanModel
    actor: ActorLike
    d: Diffeomorphism

    def predict_next(self, z_hat: np.ndarray, z_meas: np.ndarray) -> np.ndarray:
        x_hat = apply_h_inverse(self.d, z_hat)
        psi_next = self.model.A_r @ project(self.model, x_hat)
        if self.actor is not None:
            x_meas = apply_h_inverse(self.d, z_meas)
            psi_next = psi_next + call_actor(
                self.actor, np.concatenate([x_meas, x_hat])
            )
        return apply_h(self.d, reconstruct_state(self.model, psi_next))


def exact_transfer_predict(
    model: KoopmanModel,
    actor: ActorLike,
    d: Diffeomorphism,
    z_hat: np.ndarray,
    z_meas: np.ndarray,
) -> np.ndarray:
    return ExactTransferEstimator(model, actor, d).predict_next(z_hat, z_meas)


def residual_action_gap(
    model: KoopmanModel,
    actor: ActorLike,
    system: DynamicalSystem,
    dt: float,
    x_meas: np.ndarray,
    x_hat: np.ndarray,
) -> np.ndarray:
    """Per-sample ||a(s) - a*(s)||^2 against the analytic residual action."""
    x_meas = np.asarray(x_meas, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    a_hat = _actor_batch(actor, np.hstack([x_meas, x_hat]))
    next_true = np.stack([rk4_step(system, x, dt) for x in x_meas])
    psi_next = model.U.T @ lift_matrix(model.dictionary, next_true)
    psi_hat = model.U.T @ lift_matrix(model.dictionary, x_hat)
    a_star = (psi_next - model.A_r @ psi_hat).T
    return np.sum((a_hat - a_star) ** 2, axis=1)


@dataclass
class BoundCheckReport:
    lipschitz: float
    eps: float
    bound: float
    max_error: float
    margin: float
    violations: list[int]
    passed: bool


def check_error_bound(
    lipschitz: float,
    eps: float,
    squared_errors: np.ndarray,
    tolerance: float = 1e-8,
) -> BoundCheckReport:
    """Verify every one-step squared error stays within K * eps (+ tol)."""
    squared_errors = np.asarray(squared_errors, dtype=np.float64)
    bound = lipschitz * eps + tolerance
    violations = [int(i) for i in np.nonzero(squared_errors > bound)[0]]
    max_error = float(np.max(squared_errors)) if squared_errors.size else 0.0
    return BoundCheckReport(
        lipschitz=lipschitz,
        eps=eps,
        bound=bound,
        max_error=max_error,
        margin=bound - max_error,
        violations=violations,
        passed=not violations,
    )


def _finetune_env(
    te: TransferredEstimator, trajectories_z: list[Trajectory]
) -> KoopmanResidualEnv:
    """Training environment in z with exploration sized to what the
    transferred estimator still gets wrong.

    The action reaches the estimate only through PU composed with the
    action map, so unit noise is pushed through the pseudoinverse of that
    composition, scaled per state entry by the larger of the transferred
    estimator's one-step residual and its rollout drift (capped at the
    data extent). The estimate is clamped to the data box during training
    only, as in source training.
    """
    spread_rows, drift_rows = [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for t in trajectories_z:
            pred = np.stack(
                [te.predict_next(t.states[k], t.states[k]) for k in range(t.steps)]
            )
            spread_rows.append(np.abs(t.states[1:] - pred))
        for t in trajectories_z[:3]:
            ro = rollout(te, t)
            d = np.abs(ro.states[1:] - t.states[1:])
            if np.all(np.isfinite(d)):
                drift_rows.append(d)
    extent = np.max(
        np.abs(np.vstack([t.states for t in trajectories_z])), axis=0
    )
    spread_all = np.vstack(spread_rows)
    spread_all = np.where(np.isfinite(spread_all), spread_all, extent)
    kappa = np.quantile(spread_all, 0.99, axis=0)
    if drift_rows:
        drift = np.quantile(np.vstack(drift_rows), 0.99, axis=0)
        kappa = np.maximum(kappa, 1.2 * drift)
    kappa = np.minimum(np.maximum(kappa, 1e-9), np.maximum(extent, 1e-9))
    pu = te.model.U[: te.model.n, :]
    effect = pu @ te.action_map
    noise_map = np.linalg.pinv(effect) * kappa[np.newaxis, :]
    return KoopmanResidualEnv(
        te.model,
        operator=te.composed_operator,
        action_map=te.action_map,
        clip_box=1.2 * np.maximum(extent, 1e-9),
        noise_map=noise_map,
    )


def warm_start_finetune(
    te: TransferredEstimator,
    trajectories_z: list[Trajectory],
    config: TrainConfig,
) -> tuple[Agent, TrainingHistory]:
    """Continue training in z-coordinates from the transferred policy.

    The environment embeds the transferred linear part and action map; the
    agent's actor starts as a copy of the source actor (architectures match
    by construction), the critic starts fresh. Zero episodes returns the
    copied policy untouched, i.e. the transferred estimator itself.
    """
    if not isinstance(te.actor, Mlp):
        raise ValueError("warm start needs the source actor's network weights")
    env = _finetune_env(te, trajectories_z)
    agent = ddpg.init_agent(
        2 * te.model.n, te.model.r, config, te.actor.out_scale
    )
    agent.actor = clone(te.actor)
    agent.actor_target = clone(te.actor)
    return ddpg.train(agent, env, trajectories_z, config)


def random_init_finetune(
    te: TransferredEstimator,
    trajectories_z: list[Trajectory],
    config: TrainConfig,
) -> tuple[Agent, TrainingHistory]:
    """Control arm: same environment and budget, fresh random actor."""
    scale = te.actor.out_scale if isinstance(te.actor, Mlp) else 1.0
    env = _finetune_env(te, trajectories_z)
    agent = ddpg.init_agent(2 * te.model.n, te.model.r, config, scale)
    return ddpg.train(agent, env, trajectories_z, config)


def maps_to_dict(maps: TransferMaps) -> dict:
    return {
        "O1": maps.O1.tolist(),
        "O2": maps.O2.tolist(),
        "o1_residual": maps.o1_residual,
        "o2_residual": maps.o2_residual,
    }


def maps_from_dict(payload: dict) -> TransferMaps:
    return TransferMaps(
        O1=np.array(payload["O1"], dtype=np.float64),
        O2=np.array(payload["O2"], dtype=np.float64),
        o1_residual=float(payload["o1_residual"]),
        o2_residual=float(payload["o2_residual"]),
    )
