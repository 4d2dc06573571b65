"""Command-line pipeline: generate, fit, train, evaluate, transfer, fine-tune.

Every command takes --config (a JSON file path or the name of a shipped
preset), an optional --seed override, and an optional --out directory; the
default output directory is runs/<name>-seed<seed>. Commands communicate
through files in that directory, so a full experiment is

    koopest generate  --config toy
    koopest fit-edmd  --config toy
    koopest train     --config toy
    koopest evaluate  --config toy --methods hybrid,edmd

and re-running any prefix with the same config and seed rewrites identical
artifacts. Failures print one JSON object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from . import ddpg, edmd
from .config import ExperimentConfig
from .dynamics import Trajectory, read_trajectory_csv, write_trajectory_csv
from .estimator import (
    DirectEstimator,
    HybridEstimator,
    rollout,
    timed_rollouts,
    train_hybrid,
    rl_only_baseline,
)
from .transfer import (
    build_transferred,
    check_error_bound,
    exact_transfer_predict,
    fit_transfer_maps,
    maps_from_dict,
    maps_to_dict,
    random_init_finetune,
    residual_action_gap,
    warm_start_finetune,
    with_lipschitz,
)


class CliError(ValueError):
    """Bad invocation or unusable artifact state."""


def _jsonable(obj):
    """Recursively convert to JSON-safe values; non-finite floats become null."""
    if isinstance(obj, (np.floating, np.integer)):
        obj = obj.item()
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2)
        fh.write("\n")


def _read_json(path: str) -> dict:
    if not os.path.exists(path):
        raise CliError(f"missing artifact {path}; run the earlier stages first")
    with open(path) as fh:
        return json.load(fh)


def default_out(config: ExperimentConfig) -> str:
    return os.path.join("runs", f"{config.name}-seed{config.seed}")


def _data_dir(out: str) -> str:
    return os.path.join(out, "data")


def _load_set(out: str, label: str) -> list[Trajectory]:
    manifest = _read_json(os.path.join(_data_dir(out), "manifest.json"))
    names = manifest["files"].get(label)
    if not names:
        raise CliError(f"manifest lists no {label!r} trajectories")
    return [read_trajectory_csv(os.path.join(_data_dir(out), f)) for f in names]


# ---------------------------------------------------------------------------
# commands

def cmd_generate(config: ExperimentConfig, out: str) -> None:
    clean, measured = cfgmod.train_data(config, config.seed)
    test_clean, test_measured = cfgmod.test_data(config, config.seed)
    data_dir = _data_dir(out)
    os.makedirs(data_dir, exist_ok=True)
    files: dict[str, list[str]] = {}
    for label, trajs in (
        ("train_clean", clean),
        ("train_measured", measured),
        ("test_clean", test_clean),
        ("test_measured", test_measured),
    ):
        files[label] = []
        for i, t in enumerate(trajs):
            name = f"{label}_{i:02d}.csv"
            write_trajectory_csv(os.path.join(data_dir, name), t)
            files[label].append(name)
    manifest = {
        "files": files,
        "snapshot_pairs": config.train_trajectories * config.train_steps,
        "test_pairs": config.test_trajectories * config.test_steps,
        "provenance": cfgmod.provenance(config),
    }
    _write_json(os.path.join(data_dir, "manifest.json"), manifest)
    print(
        f"wrote {config.train_trajectories} training and "
        f"{config.test_trajectories} test trajectories "
        f"({manifest['snapshot_pairs']} snapshot pairs) to {data_dir}"
    )


def cmd_fit_edmd(config: ExperimentConfig, out: str) -> None:
    measured = _load_set(out, "train_measured")
    model, dataset = cfgmod.fit_from_trajectories(config, measured)
    edmd.save_model(
        os.path.join(out, "model.json"),
        model,
        extra={"provenance": cfgmod.provenance(config)},
    )
    with open(os.path.join(out, "singular_values.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "sigma"])
        for i, s in enumerate(model.sigma):
            writer.writerow([i + 1, repr(float(s))])
    print(
        f"fitted rank-{model.r} operator on {dataset.count} pairs "
        f"(dictionary size {model.dictionary.size})"
    )


def cmd_train(config: ExperimentConfig, out: str, method: str) -> None:
    measured = _load_set(out, "train_measured")
    tc = cfgmod.train_config(config)
    t0 = time.perf_counter()
    if method == "hybrid":
        model = edmd.load_model(os.path.join(out, "model.json"))
        _, agent, history = train_hybrid(model, measured, tc)
    else:
        _, agent, history = rl_only_baseline(measured, tc)
    wall = time.perf_counter() - t0
    payload = ddpg.agent_to_dict(agent)
    payload["provenance"] = cfgmod.provenance(config)
    _write_json(os.path.join(out, f"agent_{method}.json"), payload)
    with open(
        os.path.join(out, f"training_log_{method}.csv"), "w", newline=""
    ) as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "step", "reward", "critic_loss", "actor_grad_norm"])
        for rec in history.steps:
            writer.writerow(
                [rec.episode, rec.step, repr(rec.reward), repr(rec.critic_loss),
                 repr(rec.actor_grad_norm)]
            )
    with open(
        os.path.join(out, f"episode_rewards_{method}.csv"), "w", newline=""
    ) as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "reward"])
        for i, r in enumerate(history.episode_rewards):
            writer.writerow([i + 1, repr(r)])
    _write_json(
        os.path.join(out, f"train_meta_{method}.json"),
        {
            "method": method,
            "wall_seconds": wall,
            "episodes": len(history.episode_rewards),
            "target_copies": history.target_copies,
            "provenance": cfgmod.provenance(config),
        },
    )
    print(
        f"trained {method} agent for {len(history.episode_rewards)} episodes "
        f"in {wall:.1f}s"
    )


def _build_estimator(out: str, method: str):
    if method == "edmd":
        model = edmd.load_model(os.path.join(out, "model.json"))
        return HybridEstimator(model=model, actor=None)
    if method == "hybrid":
        model = edmd.load_model(os.path.join(out, "model.json"))
        agent = ddpg.agent_from_dict(_read_json(os.path.join(out, "agent_hybrid.json")))
        return HybridEstimator(model=model, actor=agent.actor)
    if method == "rl":
        agent = ddpg.agent_from_dict(_read_json(os.path.join(out, "agent_rl.json")))
        return DirectEstimator(actor=agent.actor)
    raise CliError(f"unknown evaluation method {method!r}")


def _write_rollout_csv(
    path: str, truth: Trajectory, estimate: Trajectory
) -> None:
    n = truth.n
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = (
            ["t"]
            + [f"x{i + 1}_true" for i in range(n)]
            + [f"x{i + 1}_hat" for i in range(n)]
        )
        writer.writerow(header)
        for k in range(truth.states.shape[0]):
            row = [repr(k * truth.dt)]
            row += [repr(float(v)) for v in truth.states[k]]
            row += [repr(float(v)) for v in estimate.states[k]]
            writer.writerow(row)


def cmd_evaluate(config: ExperimentConfig, out: str, methods: list[str]) -> None:
    test_clean = _load_set(out, "test_clean")
    test_measured = _load_set(out, "test_measured")
    lines = []
    for method in methods:
        est = _build_estimator(out, method)
        with np.errstate(over="ignore", invalid="ignore"):
            report = timed_rollouts(est, test_measured, test_clean)
            for i, (m, c) in enumerate(zip(test_measured, test_clean)):
                _write_rollout_csv(
                    os.path.join(out, f"rollout_{method}_{i:02d}.csv"),
                    c,
                    rollout(est, m),
                )
        _write_json(
            os.path.join(out, f"report_{method}.json"),
            {
                "method": method,
                "mse": report.aggregate,
                "per_trajectory": report.per_trajectory,
                "normalization": report.normalization,
                "wall_seconds": report.wall_seconds,
                "provenance": cfgmod.provenance(config),
            },
        )
        shown = f"{report.aggregate:.6g}" if math.isfinite(report.aggregate) else "diverged"
        lines.append(f"{method}: mse={shown}")
    print("  ".join(lines))


def cmd_transfer(config: ExperimentConfig, out: str) -> None:
    model = edmd.load_model(os.path.join(out, "model.json"))
    agent = ddpg.agent_from_dict(_read_json(os.path.join(out, "agent_hybrid.json")))
    measured = _load_set(out, "train_measured")
    train_clean = _load_set(out, "train_clean")
    test_clean = _load_set(out, "test_clean")
    d = with_lipschitz(cfgmod.make_experiment_diffeo(config))
    t0 = time.perf_counter()
    maps = fit_transfer_maps(model, agent.actor, measured, d)
    te = build_transferred(model, agent.actor, maps)
    construction_wall = time.perf_counter() - t0

    # source-side residual-action gap, evaluated on noiseless states so the
    # oracle action is well defined; test states included to cover the
    # region the bound is checked on
    system = cfgmod.make_system(config)
    states = np.vstack(
        [t.states[:-1] for t in train_clean] + [t.states[:-1] for t in test_clean]
    )
    gaps = residual_action_gap(
        model, agent.actor, system, config.dt, states, states
    )
    eps = float(np.max(gaps))

    z_test_clean, z_test_measured = cfgmod.z_test_data(config, config.seed, d)
    with np.errstate(over="ignore", invalid="ignore"):
        report = timed_rollouts(te, z_test_measured, z_test_clean)
        for i, (m, c) in enumerate(zip(z_test_measured, z_test_clean)):
            _write_rollout_csv(
                os.path.join(out, f"rollout_transferred_{i:02d}.csv"),
                c,
                rollout(te, m),
            )
    _write_json(
        os.path.join(out, "report_transferred.json"),
        {
            "method": "transferred",
            "mse": report.aggregate,
            "per_trajectory": report.per_trajectory,
            "normalization": report.normalization,
            "wall_seconds": report.wall_seconds,
            "provenance": cfgmod.provenance(config),
        },
    )

    # one-step bound check for the exact pullback estimator on clean z data
    errors = []
    with np.errstate(over="ignore", invalid="ignore"):
        for t in z_test_clean:
            for k in range(t.steps):
                z_next = exact_transfer_predict(
                    model, agent.actor, d, t.states[k], t.states[k]
                )
                errors.append(float(np.sum((z_next - t.states[k + 1]) ** 2)))
    bound = check_error_bound(float(d.lipschitz_estimate), eps, np.array(errors))

    meta_path = os.path.join(out, "train_meta_hybrid.json")
    training_wall = (
        float(_read_json(meta_path)["wall_seconds"]) if os.path.exists(meta_path) else None
    )
    bundle = {
        "schema_version": 1,
        "maps": maps_to_dict(maps),
        "diffeo": {
            "kind": d.kind,
            "params": config.diffeo_params,
            "lipschitz_estimate": d.lipschitz_estimate,
        },
        "epsilon": eps,
        "construction_seconds": construction_wall,
        "training_seconds": training_wall,
        "speedup_ratio": (
            construction_wall / training_wall if training_wall else None
        ),
        "provenance": cfgmod.provenance(config),
    }
    _write_json(os.path.join(out, "transfer_bundle.json"), bundle)
    _write_json(
        os.path.join(out, "bound_check.json"),
        {
            "lipschitz": bound.lipschitz,
            "epsilon": bound.eps,
            "bound": bound.bound,
            "max_squared_error": bound.max_error,
            "margin": bound.margin,
            "violations": bound.violations,
            "passed": bound.passed,
            "samples": len(errors),
            "provenance": cfgmod.provenance(config),
        },
    )
    shown = f"{report.aggregate:.6g}" if math.isfinite(report.aggregate) else "diverged"
    print(
        f"transferred estimator mse={shown}; bound "
        f"{'holds' if bound.passed else 'violated'} "
        f"(max {bound.max_error:.3g} vs {bound.bound:.3g}); "
        f"construction {construction_wall:.2f}s"
    )


def cmd_finetune(config: ExperimentConfig, out: str) -> None:
    model = edmd.load_model(os.path.join(out, "model.json"))
    agent = ddpg.agent_from_dict(_read_json(os.path.join(out, "agent_hybrid.json")))
    bundle = _read_json(os.path.join(out, "transfer_bundle.json"))
    maps = maps_from_dict(bundle["maps"])
    te = build_transferred(model, agent.actor, maps)
    d = cfgmod.make_experiment_diffeo(config)
    _, measured_z = cfgmod.z_train_data(config, config.seed, d)
    fc = cfgmod.finetune_config(config)
    warm_agent, warm_hist = warm_start_finetune(te, measured_z, fc)
    _, rand_hist = random_init_finetune(te, measured_z, fc)
    episodes = len(warm_hist.episode_rewards)
    with open(os.path.join(out, "finetune_rewards.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + [f"ep{i + 1}" for i in range(episodes)])
        writer.writerow(["transferred"] + [repr(r) for r in warm_hist.episode_rewards])
        writer.writerow(["random"] + [repr(r) for r in rand_hist.episode_rewards])
    payload = ddpg.agent_to_dict(warm_agent)
    payload["provenance"] = cfgmod.provenance(config)
    _write_json(os.path.join(out, "agent_finetuned.json"), payload)
    if episodes:
        head = min(3, episodes)
        w = float(np.mean(warm_hist.episode_rewards[:head]))
        r = float(np.mean(rand_hist.episode_rewards[:head]))
        print(
            f"fine-tuned {episodes} episodes; first-{head} mean reward "
            f"transferred={w:.4g} random={r:.4g}"
        )
    else:
        print("zero fine-tune episodes requested; transferred policy kept as is")


# ---------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits without JSON
        raise CliError(message)


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument(
        "--config", required=True,
        help="path to a config JSON file, or a preset name "
        f"({', '.join(cfgmod.preset_names())})",
    )
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="output directory (default runs/<name>-seed<seed>)")
    parser = _Parser(prog="koopest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common])
    sub.add_parser("fit-edmd", parents=[common])
    p_train = sub.add_parser("train", parents=[common])
    p_train.add_argument(
        "--method", choices=("hybrid", "rl"), default="hybrid",
        help="hybrid correction policy (default) or the model-free baseline",
    )
    p_eval = sub.add_parser("evaluate", parents=[common])
    p_eval.add_argument(
        "--methods", default="hybrid,edmd",
        help="comma-separated subset of hybrid,edmd,rl",
    )
    sub.add_parser("transfer", parents=[common])
    sub.add_parser("finetune", parents=[common])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        config = cfgmod.resolve_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        out = args.out or default_out(config)
        os.makedirs(out, exist_ok=True)
        if command == "generate":
            cmd_generate(config, out)
        elif command == "fit-edmd":
            cmd_fit_edmd(config, out)
        elif command == "train":
            cmd_train(config, out, args.method)
        elif command == "evaluate":
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            if not methods:
                raise CliError("no evaluation methods requested")
            cmd_evaluate(config, out, methods)
        elif command == "transfer":
            cmd_transfer(config, out)
        elif command == "finetune":
            cmd_finetune(config, out)
        else:
            raise CliError(f"unknown command {command!r}")
    except SystemExit:
        raise
    except Exception as err:
        json.dump(
            {"error": type(err).__name__, "message": str(err), "command": command},
            sys.stderr,
        )
        sys.stderr.write("\n")
        usage_error = isinstance(err, (CliError, FileNotFoundError, ValueError))
        return 2 if usage_error else 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
