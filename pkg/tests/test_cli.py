"""End-to-end checks of the command pipeline through cli.main (no subprocess)."""

import json
import math
import os

import numpy as np
import pytest

from koopest import cli, ddpg, edmd
from koopest.cli import default_out, main
from koopest.config import ExperimentConfig, save_config
from koopest.ddpg import TrainConfig
from koopest.dynamics import read_trajectory_csv
from koopest.estimator import HybridEstimator, timed_rollouts


def _tiny_train(episodes=2):
    return TrainConfig(
        episodes=episodes, batch_size=8, target_period=5, buffer_capacity=200,
        hidden_width=8, actor_warmup=5, updates_per_step=1,
    )


def _tiny_config(**kwargs):
    base = dict(
        name="clitiny", system="toy", dt=0.1,
        train_trajectories=3, train_steps=15,
        test_trajectories=2, test_steps=10,
        init_radius=2.0, noise_kind="snr_db", noise_snr_db=30.0,
        degree=2, seed=0, train=_tiny_train(),
        diffeo_kind="scaling", diffeo_params={"factor": 2.0},
        finetune=_tiny_train(),
    )
    base.update(kwargs)
    return ExperimentConfig(**base)


def _run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full six-command run on a tiny noisy config with a scaling diffeo."""
    root = tmp_path_factory.mktemp("pipeline")
    config = _tiny_config()
    cfg_path = str(root / "config.json")
    save_config(cfg_path, config)
    out = str(root / "out")
    for argv in (
        ["generate", "--config", cfg_path, "--out", out],
        ["fit-edmd", "--config", cfg_path, "--out", out],
        ["train", "--config", cfg_path, "--out", out],
        ["train", "--config", cfg_path, "--out", out, "--method", "rl"],
        ["evaluate", "--config", cfg_path, "--out", out, "--methods", "hybrid,edmd,rl"],
        ["transfer", "--config", cfg_path, "--out", out],
        ["finetune", "--config", cfg_path, "--out", out],
    ):
        assert _run(*argv) == 0, f"command failed: {argv}"
    return {"root": root, "config": config, "cfg_path": cfg_path, "out": out}


def test_manifest_counts(pipeline):
    with open(os.path.join(pipeline["out"], "data", "manifest.json")) as fh:
        manifest = json.load(fh)
    config = pipeline["config"]
    assert manifest["snapshot_pairs"] == config.train_trajectories * config.train_steps
    assert manifest["test_pairs"] == config.test_trajectories * config.test_steps
    assert len(manifest["files"]["train_measured"]) == config.train_trajectories
    assert len(manifest["files"]["test_clean"]) == config.test_trajectories
    assert manifest["provenance"]["seed"] == 0
    assert manifest["provenance"]["config_name"] == "clitiny"


def test_model_and_training_artifacts(pipeline):
    out = pipeline["out"]
    model = edmd.load_model(os.path.join(out, "model.json"))
    assert model.dictionary.size == 5 and model.r >= 1
    with open(os.path.join(out, "singular_values.csv")) as fh:
        rows = fh.read().strip().splitlines()
    assert rows[0] == "index,sigma" and len(rows) >= 2
    for method in ("hybrid", "rl"):
        assert os.path.exists(os.path.join(out, f"agent_{method}.json"))
        with open(os.path.join(out, f"episode_rewards_{method}.csv")) as fh:
            lines = fh.read().strip().splitlines()
        assert len(lines) == 1 + pipeline["config"].train.episodes
        with open(os.path.join(out, f"train_meta_{method}.json")) as fh:
            meta = json.load(fh)
        assert meta["episodes"] == pipeline["config"].train.episodes
        assert meta["wall_seconds"] > 0


def test_reports_written_for_each_method(pipeline):
    out = pipeline["out"]
    for method in ("hybrid", "edmd", "rl"):
        with open(os.path.join(out, f"report_{method}.json")) as fh:
            report = json.load(fh)
        assert report["method"] == method
        assert report["mse"] is None or math.isfinite(report["mse"])
        assert len(report["per_trajectory"]) == 2
        for i in range(2):
            assert os.path.exists(os.path.join(out, f"rollout_{method}_{i:02d}.csv"))


def test_generate_and_train_rerun_bit_identical(pipeline):
    rerun = str(pipeline["root"] / "rerun")
    cfg_path = pipeline["cfg_path"]
    assert _run("generate", "--config", cfg_path, "--out", rerun) == 0
    assert _run("fit-edmd", "--config", cfg_path, "--out", rerun) == 0
    assert _run("train", "--config", cfg_path, "--out", rerun) == 0
    first_data = os.path.join(pipeline["out"], "data")
    for name in sorted(os.listdir(first_data)):
        with open(os.path.join(first_data, name), "rb") as fh:
            a = fh.read()
        with open(os.path.join(rerun, "data", name), "rb") as fh:
            b = fh.read()
        assert a == b, f"{name} differs between identical runs"
    for name in ("model.json", "agent_hybrid.json"):
        with open(os.path.join(pipeline["out"], name), "rb") as fh:
            a = fh.read()
        with open(os.path.join(rerun, name), "rb") as fh:
            b = fh.read()
        assert a == b, f"{name} differs between identical runs"


def test_edmd_report_matches_zero_action_rollout(pipeline):
    out = pipeline["out"]
    with open(os.path.join(out, "data", "manifest.json")) as fh:
        manifest = json.load(fh)
    data_dir = os.path.join(out, "data")
    clean = [
        read_trajectory_csv(os.path.join(data_dir, f))
        for f in manifest["files"]["test_clean"]
    ]
    measured = [
        read_trajectory_csv(os.path.join(data_dir, f))
        for f in manifest["files"]["test_measured"]
    ]
    model = edmd.load_model(os.path.join(out, "model.json"))
    est = HybridEstimator(model=model, actor=None)
    with np.errstate(over="ignore", invalid="ignore"):
        report = timed_rollouts(est, measured, clean)
    with open(os.path.join(out, "report_edmd.json")) as fh:
        stored = json.load(fh)
    assert abs(report.aggregate - stored["mse"]) <= 1e-12 * max(1.0, abs(report.aggregate))


def test_transfer_artifacts(pipeline):
    out = pipeline["out"]
    with open(os.path.join(out, "transfer_bundle.json")) as fh:
        bundle = json.load(fh)
    assert bundle["diffeo"]["kind"] == "scaling"
    assert bundle["epsilon"] >= 0
    assert bundle["construction_seconds"] > 0
    assert bundle["speedup_ratio"] is not None
    with open(os.path.join(out, "bound_check.json")) as fh:
        check = json.load(fh)
    assert check["samples"] == 2 * 10
    # bound carries the report's numerical slack on top of K * eps
    assert check["bound"] == pytest.approx(
        check["lipschitz"] * check["epsilon"] + 1e-8
    )
    with open(os.path.join(out, "report_transferred.json")) as fh:
        report = json.load(fh)
    assert report["method"] == "transferred"
    assert len(report["per_trajectory"]) == 2


def test_finetune_rewards_csv(pipeline):
    out = pipeline["out"]
    episodes = pipeline["config"].finetune.episodes
    with open(os.path.join(out, "finetune_rewards.csv")) as fh:
        rows = [line.split(",") for line in fh.read().strip().splitlines()]
    assert rows[0] == ["method"] + [f"ep{i + 1}" for i in range(episodes)]
    assert rows[1][0] == "transferred" and rows[2][0] == "random"
    assert len(rows[1]) == len(rows[2]) == 1 + episodes
    assert all(math.isfinite(float(v)) for v in rows[1][1:] + rows[2][1:])
    assert os.path.exists(os.path.join(out, "agent_finetuned.json"))


def test_finetune_zero_episodes_keeps_policy(pipeline):
    # reuses the trained artifacts; only the fine-tune budget changes
    root = pipeline["root"]
    config = _tiny_config(finetune=_tiny_train(episodes=0))
    cfg_path = str(root / "config_zero.json")
    save_config(cfg_path, config)
    out = pipeline["out"]
    assert _run("finetune", "--config", cfg_path, "--out", out) == 0
    with open(os.path.join(out, "finetune_rewards.csv")) as fh:
        rows = [line.split(",") for line in fh.read().strip().splitlines()]
    assert rows[0] == ["method"]
    assert len(rows[1]) == len(rows[2]) == 1
    with open(os.path.join(out, "agent_hybrid.json")) as fh:
        source = json.load(fh)
    with open(os.path.join(out, "agent_finetuned.json")) as fh:
        kept = json.load(fh)
    assert kept["actor"] == source["actor"]


def test_missing_artifact_gives_json_error(tmp_path, capsys):
    config = _tiny_config()
    cfg_path = str(tmp_path / "config.json")
    save_config(cfg_path, config)
    rc = _run("evaluate", "--config", cfg_path, "--out", str(tmp_path / "empty"))
    captured = capsys.readouterr()
    assert rc == 2
    payload = json.loads(captured.err)
    assert payload["error"] and "missing artifact" in payload["message"]
    assert payload["command"] == "evaluate"


def test_unknown_config_gives_json_error(tmp_path, capsys):
    rc = _run("generate", "--config", "no_such_preset", "--out", str(tmp_path))
    captured = capsys.readouterr()
    assert rc == 2
    payload = json.loads(captured.err)
    assert payload["error"] == "FileNotFoundError"


def test_bad_evaluate_method_gives_json_error(pipeline, capsys):
    rc = _run(
        "evaluate", "--config", pipeline["cfg_path"],
        "--out", pipeline["out"], "--methods", "bogus",
    )
    captured = capsys.readouterr()
    assert rc == 2
    assert "unknown evaluation method" in json.loads(captured.err)["message"]


def test_missing_required_flag_gives_json_error(capsys):
    rc = _run("generate")
    captured = capsys.readouterr()
    assert rc == 2
    assert json.loads(captured.err)["error"] == "CliError"


def test_seed_override_lands_in_provenance(tmp_path):
    config = _tiny_config()
    cfg_path = str(tmp_path / "config.json")
    save_config(cfg_path, config)
    out = str(tmp_path / "out9")
    assert _run("generate", "--config", cfg_path, "--out", out, "--seed", "9") == 0
    with open(os.path.join(out, "data", "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["provenance"]["seed"] == 9


def test_default_out_layout():
    config = _tiny_config(name="abc", seed=7)
    assert default_out(config) == os.path.join("runs", "abc-seed7")


def test_identity_transfer_reproduces_hybrid_error(tmp_path_factory):
    """With h = id and no noise the transferred estimator is the source one."""
    root = tmp_path_factory.mktemp("identity")
    config = _tiny_config(
        name="cliid", noise_kind="none", noise_snr_db=0.0,
        diffeo_kind="identity", diffeo_params={}, finetune=None,
    )
    cfg_path = str(root / "config.json")
    save_config(cfg_path, config)
    out = str(root / "out")
    for argv in (
        ["generate", "--config", cfg_path, "--out", out],
        ["fit-edmd", "--config", cfg_path, "--out", out],
        ["train", "--config", cfg_path, "--out", out],
        ["evaluate", "--config", cfg_path, "--out", out, "--methods", "hybrid"],
        ["transfer", "--config", cfg_path, "--out", out],
    ):
        assert _run(*argv) == 0, f"command failed: {argv}"
    with open(os.path.join(out, "report_hybrid.json")) as fh:
        hybrid = json.load(fh)
    with open(os.path.join(out, "report_transferred.json")) as fh:
        transferred = json.load(fh)
    assert abs(hybrid["mse"] - transferred["mse"]) < 1e-8
