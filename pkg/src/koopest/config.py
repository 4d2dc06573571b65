"""One-document experiment description and the data plumbing derived from it.

An ExperimentConfig pins everything a run needs: the plant, the sampling
grid, the measurement noise, the dictionary and rank policy, the training
hyperparameters, and (for transfer runs) the coordinate change and the
fine-tuning budget. A single master seed drives every random draw through
fixed offsets, so two runs with the same config and seed produce identical
datasets, identical replay streams, and identical artifacts.

Seed layout (offsets chosen once, never derived from wall clock):
    training initial conditions   100 + seed
    test initial conditions       900 + seed
    training measurement noise    1000 * seed + trajectory index
    test measurement noise        7000 * seed + trajectory index
    z-domain training noise       500_000 + 1000 * seed + index
    z-domain test noise           700_000 + 1000 * seed + index
The nested TrainConfig seeds are overwritten with the master seed; the
value stored in JSON under "train" / "finetune" is ignored on purpose.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ddpg import TrainConfig
from .dictionary import build_dictionary, lift_matrix
from .dynamics import (
    Disk,
    NoiseSpec,
    SnapshotDataset,
    Trajectory,
    ToySystem,
    VanDerPol,
    add_measurement_noise,
    build_snapshot_dataset,
    sample_initial_conditions,
    simulate,
)
from .edmd import KoopmanModel, RankPolicy, fit_reduced
from .transfer import Diffeomorphism, make_diffeo, map_trajectory

SCHEMA_VERSION = 1

TRAIN_IC_OFFSET = 100
TEST_IC_OFFSET = 900
TRAIN_NOISE_STRIDE = 1000
TEST_NOISE_STRIDE = 7000
Z_TRAIN_NOISE_OFFSET = 500_000
Z_TEST_NOISE_OFFSET = 700_000


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, JSON-serializable in one file."""

    name: str = "toy"
    system: str = "toy"  # "toy" | "vanderpol"
    alpha: float = 1.0  # vanderpol stiffness; unused for the toy plant
    dt: float = 0.1
    train_trajectories: int = 20
    train_steps: int = 200
    test_trajectories: int = 3
    test_steps: int = 200
    init_radius: float = 10.0
    noise_kind: str = "snr_db"
    noise_sigma: float = 0.0
    noise_snr_db: float = 20.0
    degree: int = 4
    rank_kind: str = "energy"
    rank_r: int = 0
    rank_tau: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    diffeo_kind: str | None = None
    diffeo_params: dict = field(default_factory=dict)
    finetune: TrainConfig | None = None
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(
                f"config schema version {self.schema_version} not supported "
                f"(expected {SCHEMA_VERSION})"
            )
        if self.system not in ("toy", "vanderpol"):
            raise ValueError(f"unknown system {self.system!r}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        for label, value in (
            ("train_trajectories", self.train_trajectories),
            ("train_steps", self.train_steps),
            ("test_trajectories", self.test_trajectories),
            ("test_steps", self.test_steps),
        ):
            if value < 1:
                raise ValueError(f"{label} must be >= 1, got {value}")
        if self.init_radius <= 0:
            raise ValueError(f"init_radius must be positive, got {self.init_radius}")
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        # delegate detailed validation to the dataclasses these feed
        NoiseSpec(kind=self.noise_kind, sigma=self.noise_sigma, snr_db=self.noise_snr_db)
        self.rank_policy()
        if self.diffeo_kind is None and self.finetune is not None:
            raise ValueError("finetune requires a diffeo_kind")

    def rank_policy(self) -> RankPolicy:
        if self.rank_kind == "fixed":
            return RankPolicy.fixed(self.rank_r)
        return RankPolicy(kind=self.rank_kind, tau=self.rank_tau)


def make_system(config: ExperimentConfig):
    if config.system == "vanderpol":
        return VanDerPol(alpha=config.alpha)
    return ToySystem()


def make_experiment_diffeo(config: ExperimentConfig) -> Diffeomorphism:
    if config.diffeo_kind is None:
        raise ValueError(f"config {config.name!r} declares no coordinate change")
    return make_diffeo(config.diffeo_kind, **config.diffeo_params)


def train_config(config: ExperimentConfig, seed: int | None = None) -> TrainConfig:
    """Training hyperparameters with the master seed folded in."""
    return dataclasses.replace(
        config.train, seed=config.seed if seed is None else seed
    )


def finetune_config(config: ExperimentConfig, seed: int | None = None) -> TrainConfig:
    if config.finetune is None:
        raise ValueError(f"config {config.name!r} declares no fine-tuning stage")
    return dataclasses.replace(
        config.finetune, seed=config.seed if seed is None else seed
    )


def _noisy(
    config: ExperimentConfig, trajectories: list[Trajectory], seed0: int
) -> list[Trajectory]:
    out = []
    for i, t in enumerate(trajectories):
        spec = NoiseSpec(
            kind=config.noise_kind,
            sigma=config.noise_sigma,
            snr_db=config.noise_snr_db,
            seed=seed0 + i,
        )
        out.append(add_measurement_noise(t, spec))
    return out


def train_data(
    config: ExperimentConfig, seed: int
) -> tuple[list[Trajectory], list[Trajectory]]:
    """(clean, measured) training trajectories for the given master seed."""
    system = make_system(config)
    ics = sample_initial_conditions(
        Disk(config.init_radius), config.train_trajectories, seed=TRAIN_IC_OFFSET + seed
    )
    clean = [simulate(system, x0, config.dt, config.train_steps) for x0 in ics]
    return clean, _noisy(config, clean, TRAIN_NOISE_STRIDE * seed)


def test_data(
    config: ExperimentConfig, seed: int
) -> tuple[list[Trajectory], list[Trajectory]]:
    """(clean, measured) held-out trajectories; estimators are driven by the
    measured ones and scored against the clean ones."""
    system = make_system(config)
    ics = sample_initial_conditions(
        Disk(config.init_radius), config.test_trajectories, seed=TEST_IC_OFFSET + seed
    )
    clean = [simulate(system, x0, config.dt, config.test_steps) for x0 in ics]
    return clean, _noisy(config, clean, TEST_NOISE_STRIDE * seed)


def z_train_data(
    config: ExperimentConfig, seed: int, d: Diffeomorphism
) -> tuple[list[Trajectory], list[Trajectory]]:
    """Training data as seen in the transformed coordinates.

    The clean x-trajectories are pushed through h and fresh measurement
    noise is drawn in z, so the z-domain experiment measures z directly
    rather than inheriting mapped x-noise.
    """
    clean, _ = train_data(config, seed)
    clean_z = [map_trajectory(d, t) for t in clean]
    return clean_z, _noisy(config, clean_z, Z_TRAIN_NOISE_OFFSET + TRAIN_NOISE_STRIDE * seed)


def z_test_data(
    config: ExperimentConfig, seed: int, d: Diffeomorphism
) -> tuple[list[Trajectory], list[Trajectory]]:
    clean, _ = test_data(config, seed)
    clean_z = [map_trajectory(d, t) for t in clean]
    return clean_z, _noisy(config, clean_z, Z_TEST_NOISE_OFFSET + TRAIN_NOISE_STRIDE * seed)


def fit_model(
    config: ExperimentConfig, dataset: SnapshotDataset
) -> KoopmanModel:
    """Dictionary + reduced-rank fit as declared by the config."""
    d = build_dictionary(dataset.n, config.degree)
    return fit_reduced(
        lift_matrix(d, dataset.x),
        lift_matrix(d, dataset.y),
        d,
        config.rank_policy(),
    )


def fit_from_trajectories(
    config: ExperimentConfig, measured: list[Trajectory]
) -> tuple[KoopmanModel, SnapshotDataset]:
    dataset = build_snapshot_dataset(measured)
    return fit_model(config, dataset), dataset


# ---------------------------------------------------------------------------
# serialization

def config_to_dict(config: ExperimentConfig) -> dict:
    payload = dataclasses.asdict(config)
    return payload


def config_from_dict(payload: dict) -> ExperimentConfig:
    payload = dict(payload)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValueError(f"unknown config fields: {', '.join(unknown)}")
    if "train" in payload and payload["train"] is not None:
        payload["train"] = _train_from_dict(payload["train"])
    if payload.get("finetune") is not None:
        payload["finetune"] = _train_from_dict(payload["finetune"])
    return ExperimentConfig(**payload)


def _train_from_dict(payload: dict) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValueError(f"unknown training fields: {', '.join(unknown)}")
    return TrainConfig(**payload)


def save_config(path: str, config: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2)
        fh.write("\n")


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def config_hash(config: ExperimentConfig) -> str:
    """Short content hash used to stamp artifacts; seed-sensitive."""
    blob = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def preset_dir() -> str:
    return os.path.join(os.path.dirname(__file__), "presets")


def preset_names() -> list[str]:
    return sorted(
        os.path.splitext(f)[0]
        for f in os.listdir(preset_dir())
        if f.endswith(".json")
    )


def resolve_config(ref: str) -> ExperimentConfig:
    """Accept either a path to a JSON file or the name of a shipped preset."""
    if os.path.exists(ref):
        return load_config(ref)
    candidate = os.path.join(preset_dir(), f"{ref}.json")
    if os.path.exists(candidate):
        return load_config(candidate)
    raise FileNotFoundError(
        f"no config file at {ref!r} and no preset named {ref!r} "
        f"(available: {', '.join(preset_names())})"
    )


def provenance(config: ExperimentConfig) -> dict:
    """Stamp written into every artifact; no timestamps, reruns must match."""
    from . import __version__

    return {
        "config_name": config.name,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "koopest_version": __version__,
        "numpy_version": np.__version__,
        "schema_version": config.schema_version,
    }
