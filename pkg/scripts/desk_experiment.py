"""Desk-scale ordering experiment: every arm of the grid over three seeds.

    python3 scripts/desk_experiment.py --out results/desk [--seeds 0,1,2] [--reuse]

Writes one run directory per (arm, seed), a results table and summary.json
with the pass/fail verdict of each ordering check.
"""

import argparse
import json
import logging
import time
from pathlib import Path

from cascade_seg.experiment import (
    DESK_ARMS,
    desk_criteria,
    desk_spec,
    grid_table,
    load_grid,
    mean_dice,
    run_grid,
)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("results/desk"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--arms", default=None, help="comma-separated subset of arm names")
    p.add_argument("--reuse", action="store_true", help="only re-evaluate existing run dirs")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    seeds = [int(s) for s in args.seeds.split(",")]
    arms = DESK_ARMS if not args.arms else [a for a in DESK_ARMS if a.name in args.arms.split(",")]
    t0 = time.perf_counter()
    if args.reuse:
        results = load_grid(arms, seeds, args.out)
    else:
        results = run_grid(arms, seeds, desk_spec(), args.out)
    minutes = (time.perf_counter() - t0) / 60
    train_minutes = sum(r["row"]["runtime_s"] for reps in results.values() for r in reps) / 60

    table = grid_table(results)
    (args.out / "table.md").write_text(table)
    print(table)
    means = {name: mean_dice(reps) for name, reps in results.items()}
    for name, v in means.items():
        print(f"{name:18s} mean dice {v:.4f}")
    summary = {"seeds": seeds, "train_minutes": train_minutes, "mean_dice": means}
    if len(arms) == len(DESK_ARMS):
        checks = desk_criteria(results)
        summary["criteria"] = [c.__dict__ for c in checks]
        for c in checks:
            print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"training time {train_minutes:.1f} min (this invocation {minutes:.1f} min)")


if __name__ == "__main__":
    main()
