"""Least-squares one-step operators on lifted snapshots.

Given lifted snapshot matrices Psi_X and Psi_Y (columns are Psi of paired
states), the full operator is A = Psi_Y pinv(Psi_X). The reduced form takes
the thin SVD Psi_X = U S V^T, truncates it to rank r, and works with
A_r = U^T Psi_Y V S^{-1} acting on reduced coordinates U^T Psi(x). The
state estimate is read off the identity prefix of U times the reduced
coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dictionary import (
    PolynomialDictionary,
    dictionary_from_dict,
    dictionary_to_dict,
    lift,
)

# singular values at or below this fraction of the largest are treated as zero
PINV_RCOND = 1e-12


class RankDeficiencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankPolicy:
    """Either a fixed target rank or a cumulative energy threshold.

    With kind "energy", the rank is the smallest r whose leading singular
    values carry at least tau of the total squared energy; tau = 1.0 keeps
    everything up to the numerical rank.
    """

    kind: str = "energy"
    r: int = 0
    tau: float = 0.9999

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "energy"):
            raise ValueError(f"unknown rank policy kind {self.kind!r}")
        if self.kind == "fixed" and self.r < 1:
            raise ValueError(f"fixed rank must be >= 1, got {self.r}")
        if self.kind == "energy" and not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")

    @classmethod
    def fixed(cls, r: int) -> "RankPolicy":
        return cls(kind="fixed", r=r)

    @classmethod
    def energy(cls, tau: float) -> "RankPolicy":
        return cls(kind="energy", tau=tau)


@dataclass
class KoopmanModel:
    """Reduced one-step operator plus the basis that produced it.

    U has orthonormal columns (N x r); sigma holds the retained singular
    values; A_r is the reduced operator. V (count x r) is kept when the
    model came straight from a fit and dropped by serialization.
    """

    dictionary: PolynomialDictionary
    U: np.ndarray
    sigma: np.ndarray
    A_r: np.ndarray
    r: int
    V: np.ndarray | None = None

    def __post_init__(self) -> None:
        N = self.dictionary.size
        if self.U.shape != (N, self.r):
            raise ValueError(f"U shape {self.U.shape} does not match ({N}, {self.r})")
        if self.A_r.shape != (self.r, self.r):
            raise ValueError(f"A_r shape {self.A_r.shape} is not ({self.r}, {self.r})")
        if self.sigma.shape != (self.r,):
            raise ValueError(f"sigma shape {self.sigma.shape} is not ({self.r},)")
        if np.any(self.sigma <= 0) or np.any(np.diff(self.sigma) > 0):
            raise ValueError("sigma must be positive and non-increasing")
        gram_err = np.max(np.abs(self.U.T @ self.U - np.eye(self.r)))
        if gram_err > 1e-10:
            raise ValueError(f"U columns are not orthonormal (error {gram_err:.2e})")

    @property
    def n(self) -> int:
        return self.dictionary.n


def fit_full(psi_x: np.ndarray, psi_y: np.ndarray) -> np.ndarray:
    """A = Psi_Y pinv(Psi_X), the minimum-norm least-squares operator."""
    psi_x = np.asarray(psi_x, dtype=np.float64)
    psi_y = np.asarray(psi_y, dtype=np.float64)
    if psi_x.shape != psi_y.shape:
        raise ValueError(f"shape mismatch {psi_x.shape} vs {psi_y.shape}")
    if psi_x.shape[1] == 0:
        raise ValueError("empty snapshot matrices")
    return psi_y @ np.linalg.pinv(psi_x, rcond=PINV_RCOND)


def fit_reduced(
    psi_x: np.ndarray,
    psi_y: np.ndarray,
    dictionary: PolynomialDictionary,
    policy: RankPolicy = RankPolicy(),
) -> KoopmanModel:
    """Reduced-rank fit via truncated SVD of Psi_X."""
    psi_x = np.asarray(psi_x, dtype=np.float64)
    psi_y = np.asarray(psi_y, dtype=np.float64)
    if psi_x.shape != psi_y.shape:
        raise ValueError(f"shape mismatch {psi_x.shape} vs {psi_y.shape}")
    if psi_x.shape[0] != dictionary.size:
        raise ValueError(
            f"snapshot rows {psi_x.shape[0]} do not match dictionary size {dictionary.size}"
        )
    if psi_x.shape[1] == 0:
        raise ValueError("empty snapshot matrices")
    U, s, Vt = np.linalg.svd(psi_x, full_matrices=False)
    if s[0] == 0.0:
        raise RankDeficiencyError("snapshot matrix is identically zero")
    numerical_rank = int(np.sum(s > PINV_RCOND * s[0]))
    if policy.kind == "fixed":
        if policy.r > numerical_rank:
            raise RankDeficiencyError(
                f"requested rank {policy.r} exceeds numerical rank {numerical_rank}"
            )
        r = policy.r
    else:
        energy = np.cumsum(s**2) / np.sum(s**2)
        r = int(np.searchsorted(energy, policy.tau - 1e-15) + 1)
        r = min(r, numerical_rank)
    U_r = U[:, :r]
    s_r = s[:r]
    V_r = Vt[:r].T
    A_r = (U_r.T @ psi_y @ V_r) / s_r[np.newaxis, :]
    return KoopmanModel(dictionary=dictionary, U=U_r, sigma=s_r, A_r=A_r, r=r, V=V_r)


def project(model: KoopmanModel, x: np.ndarray) -> np.ndarray:
    """Reduced lifted coordinates U^T Psi(x)."""
    return model.U.T @ lift(model.dictionary, x)


def predict_lifted(model: KoopmanModel, psi_reduced: np.ndarray) -> np.ndarray:
    """One linear step in reduced coordinates."""
    return model.A_r @ psi_reduced


def reconstruct_state(model: KoopmanModel, psi_reduced: np.ndarray) -> np.ndarray:
    """State estimate: the identity-prefix entries of U psi_reduced."""
    return (model.U[: model.n] @ psi_reduced).copy()


def koopman_eigenvalues(model: KoopmanModel) -> np.ndarray:
    """Eigenvalues of A_r, sorted by descending modulus (then re, im)."""
    vals = np.linalg.eigvals(model.A_r)
    order = np.lexsort((-vals.imag, -vals.real, -np.abs(vals)))
    return vals[order]


def model_to_dict(model: KoopmanModel) -> dict:
    return {
        "schema_version": 1,
        "dictionary": dictionary_to_dict(model.dictionary),
        "r": model.r,
        "U": model.U.tolist(),
        "sigma": model.sigma.tolist(),
        "A_r": model.A_r.tolist(),
    }


def model_from_dict(payload: dict) -> KoopmanModel:
    return KoopmanModel(
        dictionary=dictionary_from_dict(payload["dictionary"]),
        U=np.array(payload["U"], dtype=np.float64),
        sigma=np.array(payload["sigma"], dtype=np.float64),
        A_r=np.array(payload["A_r"], dtype=np.float64),
        r=int(payload["r"]),
        V=None,
    )


def save_model(path: str, model: KoopmanModel, extra: dict | None = None) -> None:
    """Single JSON document; floats round-trip exactly through repr."""
    payload = model_to_dict(model)
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_model(path: str) -> KoopmanModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
