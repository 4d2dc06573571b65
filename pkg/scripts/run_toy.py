"""Multi-seed toy benchmark: hybrid estimator vs EDMD-only vs model-free DDPG.

For each seed this regenerates the preset dataset, fits the reduced
operator, trains the correction policy and the model-free baseline on the
same budget, and reports closed-loop test MSE for all three estimators.
A diverged rollout shows up as inf and loses every comparison.
"""

import argparse
import csv
import dataclasses
import os
import sys
import time

import numpy as np

from koopest import config as cfgmod
from koopest.estimator import (
    HybridEstimator,
    evaluate_many,
    rollout,
    rl_only_baseline,
    train_hybrid,
)


def run_seed(config, seed):
    config = dataclasses.replace(config, seed=seed)
    _, measured = cfgmod.train_data(config, seed)
    model, dataset = cfgmod.fit_from_trajectories(config, measured)
    test_clean, test_measured = cfgmod.test_data(config, seed)

    def score(est):
        with np.errstate(over="ignore", invalid="ignore"):
            pairs = [(rollout(est, m), c) for m, c in zip(test_measured, test_clean)]
            mse = evaluate_many(pairs).aggregate
        return mse if np.isfinite(mse) else np.inf

    edmd_mse = score(HybridEstimator(model=model, actor=None))
    tc = cfgmod.train_config(config)
    hybrid_est, _, _ = train_hybrid(model, measured, tc, dataset=dataset)
    hybrid_mse = score(hybrid_est)
    rl_est, _, _ = rl_only_baseline(measured, tc)
    rl_mse = score(rl_est)
    return edmd_mse, rl_mse, hybrid_mse


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="toy")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default=None, help="summary CSV path")
    args = parser.parse_args(argv)
    config = cfgmod.resolve_config(args.preset)

    rows = []
    t0 = time.perf_counter()
    for seed in args.seeds:
        e, r, h = run_seed(config, seed)
        beats_both = h < e and h < r
        rows.append((seed, e, r, h, beats_both))
        print(
            f"seed {seed}: edmd={e:.4g} rl={r:.4g} hybrid={h:.4g}"
            f"{'  hybrid beats both' if beats_both else ''}",
            flush=True,
        )
    wins = sum(row[-1] for row in rows)
    print(
        f"hybrid beats both baselines in {wins}/{len(rows)} seeds "
        f"({time.perf_counter() - t0:.0f}s total)"
    )

    out = args.out or os.path.join("runs", f"{config.name}_summary.csv")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "edmd_mse", "rl_mse", "hybrid_mse", "hybrid_beats_both"])
        for seed, e, r, h, win in rows:
            writer.writerow([seed, repr(e), repr(r), repr(h), int(win)])
    print(f"summary written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
