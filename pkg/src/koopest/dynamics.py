"""Benchmark systems, integration, sampling, and snapshot datasets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import ClassVar, Union

import numpy as np


class IntegrationDivergenceError(RuntimeError):
    pass


# one component of a polynomial vector field: sum of coeff * prod(x_i^e_i)
PolyTerm = tuple[float, tuple[int, ...]]


@dataclass(frozen=True)
class ToySystem:
    """dx1/dt = -0.7 x1, dx2/dt = -0.3 (x2 - x1^2).

    Decays to the origin from anywhere; the x1^2 forcing makes the flow
    exactly linear in the observables {x1, x2, x1^2}.
    """

    dimension: ClassVar[int] = 2

    def rhs(self, x: np.ndarray) -> np.ndarray:
        return np.array([-0.7 * x[0], -0.3 * (x[1] - x[0] ** 2)])


@dataclass(frozen=True)
class VanDerPol:
    """dx1/dt = x2, dx2/dt = alpha (1 - x1^2) x2 - x1."""

    alpha: float = 1.0
    dimension: ClassVar[int] = 2

    def rhs(self, x: np.ndarray) -> np.ndarray:
        return np.array([x[1], self.alpha * (1.0 - x[0] ** 2) * x[1] - x[0]])


@dataclass(frozen=True)
class CustomPolynomial:
    """Vector field with per-component monomial term lists."""

    dimension: int
    terms: tuple[tuple[PolyTerm, ...], ...]

    def __post_init__(self) -> None:
        if len(self.terms) != self.dimension:
            raise ValueError("need one term list per state component")

    def rhs(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.dimension)
        for i, component in enumerate(self.terms):
            for coeff, exps in component:
                out[i] += coeff * np.prod(x ** np.asarray(exps))
        return out


DynamicalSystem = Union[ToySystem, VanDerPol, CustomPolynomial]


@dataclass(frozen=True)
class Trajectory:
    """States sampled at a fixed interval; shape (steps + 1, n)."""

    dt: float
    states: np.ndarray

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ValueError(f"states must be (steps + 1, n), got {self.states.shape}")

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1


@dataclass(frozen=True)
class SnapshotDataset:
    """Paired one-step transitions: y[j] is the successor of x[j]."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        if self.x.shape != self.y.shape:
            raise ValueError(f"mismatched pair shapes {self.x.shape} vs {self.y.shape}")

    @property
    def count(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class Disk:
    radius: float


@dataclass(frozen=True)
class NoiseSpec:
    """Additive i.i.d. Gaussian measurement noise on every state entry.

    kind "none": no noise. kind "gaussian": fixed standard deviation sigma.
    kind "snr_db": sigma derived from the data so that the per-entry
    mean-square signal power exceeds the noise power by snr_db decibels.
    """

    kind: str = "none"
    sigma: float = 0.0
    snr_db: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "gaussian", "snr_db"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    @classmethod
    def none(cls) -> "NoiseSpec":
        return cls()

    @classmethod
    def gaussian(cls, sigma: float, seed: int = 0) -> "NoiseSpec":
        return cls(kind="gaussian", sigma=sigma, seed=seed)

    @classmethod
    def from_snr_db(cls, snr_db: float, seed: int = 0) -> "NoiseSpec":
        return cls(kind="snr_db", snr_db=snr_db, seed=seed)


def rk4_step(system: DynamicalSystem, x: np.ndarray, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite input state {x}")
    k1 = system.rhs(x)
    k2 = system.rhs(x + 0.5 * dt * k1)
    k3 = system.rhs(x + 0.5 * dt * k2)
    k4 = system.rhs(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationDivergenceError(
            f"state blew up integrating from {x} with dt={dt}"
        )
    return out


def simulate(
    system: DynamicalSystem, x0: np.ndarray, dt: float, steps: int
) -> Trajectory:
    """Integrate steps RK4 steps from x0; returns steps + 1 states."""
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    x0 = np.asarray(x0, dtype=np.float64)
    states = np.empty((steps + 1, x0.shape[0]))
    states[0] = x0
    for k in range(steps):
        try:
            states[k + 1] = rk4_step(system, states[k], dt)
        except IntegrationDivergenceError as err:
            raise IntegrationDivergenceError(f"step {k + 1}: {err}") from None
    return Trajectory(dt=dt, states=states)


def sample_initial_conditions(
    region: Disk, count: int, seed: int
) -> list[np.ndarray]:
    """Area-uniform points in a disk about the origin (2-D states)."""
    if region.radius <= 0:
        raise ValueError(f"disk radius must be positive, got {region.radius}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    r = region.radius * np.sqrt(rng.uniform(size=count))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    pts = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return [pts[i].copy() for i in range(count)]


def noise_sigma(spec: NoiseSpec, states: np.ndarray) -> float:
    """Resolve the noise standard deviation for the given signal."""
    if spec.kind == "none":
        return 0.0
    if spec.kind == "gaussian":
        return spec.sigma
    power = float(np.mean(np.square(states)))
    return float(np.sqrt(power * 10.0 ** (-spec.snr_db / 10.0)))


def add_measurement_noise(trajectory: Trajectory, spec: NoiseSpec) -> Trajectory:
    """Corrupt every entry with i.i.d. zero-mean Gaussian noise."""
    if spec.kind == "none":
        return trajectory
    sigma = noise_sigma(spec, trajectory.states)
    rng = np.random.default_rng(spec.seed)
    noisy = trajectory.states + rng.normal(0.0, sigma, size=trajectory.states.shape)
    return Trajectory(dt=trajectory.dt, states=noisy)


def build_snapshot_dataset(trajectories: list[Trajectory]) -> SnapshotDataset:
    """Stack (state, successor) pairs from every trajectory, in order."""
    if not trajectories:
        return SnapshotDataset(x=np.zeros((0, 0)), y=np.zeros((0, 0)))
    n = trajectories[0].n
    xs, ys = [], []
    for i, traj in enumerate(trajectories):
        if traj.n != n:
            raise ValueError(f"trajectory {i} has dimension {traj.n}, expected {n}")
        if traj.steps < 1:
            raise ValueError(f"trajectory {i} has no transitions (need >= 2 states)")
        xs.append(traj.states[:-1])
        ys.append(traj.states[1:])
    return SnapshotDataset(x=np.vstack(xs), y=np.vstack(ys))


def write_trajectory_csv(path: str, trajectory: Trajectory) -> None:
    """Header t,x1,...,xn; one state per row, full-precision decimals."""
    n = trajectory.n
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i + 1}" for i in range(n)])
        for k, row in enumerate(trajectory.states):
            writer.writerow([repr(k * trajectory.dt)] + [repr(float(v)) for v in row])


def read_trajectory_csv(path: str) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "t":
            raise ValueError(f"{path}: expected leading column 't', got {header[0]!r}")
        rows = [[float(v) for v in row] for row in reader if row]
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least two rows to recover dt ({len(rows)} found)")
    arr = np.array(rows)
    dt = arr[1, 0] - arr[0, 0]
    return Trajectory(dt=dt, states=arr[:, 1:].copy())
