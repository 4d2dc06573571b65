"""Multi-seed transfer benchmark: composed estimator vs retraining from scratch.

Per seed: train the source estimator in x-coordinates, fit the two linear
conjugation maps from stored data, and evaluate the composed estimator on
z-domain test data against an estimator trained fresh in z on the full
source budget. Also compares warm-started fine-tuning against a random
initialization over the first episodes. Construction time for the maps is
reported next to the fresh-training time.
"""

import argparse
import csv
import dataclasses
import os
import sys
import time

import numpy as np

from koopest import config as cfgmod
from koopest.estimator import evaluate_many, rollout, train_hybrid
from koopest.transfer import (
    build_transferred,
    fit_transfer_maps,
    random_init_finetune,
    warm_start_finetune,
)


def run_seed(config, seed):
    config = dataclasses.replace(config, seed=seed)
    d = cfgmod.make_experiment_diffeo(config)
    _, measured = cfgmod.train_data(config, seed)
    model, dataset = cfgmod.fit_from_trajectories(config, measured)
    tc = cfgmod.train_config(config)

    t0 = time.perf_counter()
    _, agent, _ = train_hybrid(model, measured, tc, dataset=dataset)
    source_train_time = time.perf_counter() - t0

    z_test_clean, z_test_measured = cfgmod.z_test_data(config, seed, d)

    def score(est):
        with np.errstate(over="ignore", invalid="ignore"):
            pairs = [(rollout(est, m), c) for m, c in zip(z_test_measured, z_test_clean)]
            mse = evaluate_many(pairs).aggregate
        return mse if np.isfinite(mse) else np.inf

    t0 = time.perf_counter()
    maps = fit_transfer_maps(model, agent.actor, measured, d)
    te = build_transferred(model, agent.actor, maps)
    construction_time = time.perf_counter() - t0
    transferred_mse = score(te)

    _, measured_z = cfgmod.z_train_data(config, seed, d)
    t0 = time.perf_counter()
    model_z, dataset_z = cfgmod.fit_from_trajectories(config, measured_z)
    fresh_est, _, _ = train_hybrid(model_z, measured_z, tc, dataset=dataset_z)
    fresh_train_time = time.perf_counter() - t0
    fresh_mse = score(fresh_est)

    fc = cfgmod.finetune_config(config)
    _, warm_hist = warm_start_finetune(te, measured_z, fc)
    _, rand_hist = random_init_finetune(te, measured_z, fc)
    head = min(3, len(warm_hist.episode_rewards))
    warm_head = float(np.mean(warm_hist.episode_rewards[:head])) if head else np.nan
    rand_head = float(np.mean(rand_hist.episode_rewards[:head])) if head else np.nan

    return {
        "seed": seed,
        "transferred_mse": transferred_mse,
        "fresh_mse": fresh_mse,
        "construction_s": construction_time,
        "fresh_train_s": fresh_train_time,
        "source_train_s": source_train_time,
        "warm_head_reward": warm_head,
        "random_head_reward": rand_head,
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="transfer")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    config = cfgmod.resolve_config(args.preset)

    rows = []
    for seed in args.seeds:
        row = run_seed(config, seed)
        rows.append(row)
        ratio = row["construction_s"] / max(row["fresh_train_s"], 1e-9)
        print(
            f"seed {seed}: transferred={row['transferred_mse']:.4g} "
            f"fresh={row['fresh_mse']:.4g} "
            f"construction={row['construction_s']:.2f}s "
            f"fresh-train={row['fresh_train_s']:.1f}s (ratio {ratio:.3f})  "
            f"warm-start reward {row['warm_head_reward']:.4g} "
            f"vs random {row['random_head_reward']:.4g}",
            flush=True,
        )
    transfer_wins = sum(r["transferred_mse"] <= r["fresh_mse"] for r in rows)
    warm_wins = sum(r["warm_head_reward"] > r["random_head_reward"] for r in rows)
    print(
        f"transferred <= fresh in {transfer_wins}/{len(rows)} seeds; "
        f"warm start ahead in {warm_wins}/{len(rows)} seeds"
    )

    out = args.out or os.path.join("runs", f"{config.name}_summary.csv")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(rows[0].keys()))
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
    print(f"summary written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
