"""Optional full-scale recipe on the Shenzhen chest X-ray set (not part of the
acceptance gate; needs the dataset and a GPU-sized budget).

    python3 scripts/full_scale_recipe.py --data /path/to/shenzhen --out runs/full           # dry run
    python3 scripts/full_scale_recipe.py --data /path/to/shenzhen --out runs/full --run

The dataset root needs ``images/<id>.png`` and ``masks/<id>.png`` (any
resolution; everything is resized to 256x256). The grid is the strategy x
noise-ratio x k matrix: 396/170 split, 100 epochs, batch 32, lr 0.001.
Without ``--run`` the script only writes one spec file per configuration;
each can be launched on its own with ``cascade-seg train --spec FILE``.
"""

import argparse
import json
import os
from dataclasses import replace
from pathlib import Path

from cascade_seg.experiment import DATA_ENV, execute, full_spec, load_data, run_name
from cascade_seg.metrics import ResultRow, emit_table

REFERENCE = {("vanilla", 0.0, None): 0.8989, ("ss_jo", 0.0, 20): 0.9252}


def grid(base):
    for ratio in (0.0, 0.25, 0.5, 0.75):
        noise = replace(base.noise, ratio=ratio)
        strategies = [("vanilla", None), ("coteach_small_loss", None)]
        if ratio > 0:
            strategies.append(("ss", None))
        strategies += [("ss_jo", k) for k in (20, 50, 80)]
        for strategy, k in strategies:
            t = replace(base.train, strategy=strategy)
            if k is not None:
                t = replace(t, correction=replace(t.correction, jo_start_epoch=k))
            yield replace(base, noise=noise, train=t)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default=os.environ.get(DATA_ENV))
    p.add_argument("--out", type=Path, default=Path("runs/full"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run", action="store_true", help="train every configuration")
    args = p.parse_args()
    if not args.data:
        p.error(f"pass --data or set ${DATA_ENV}")

    base = full_spec(args.data, out_dir=str(args.out))
    specs = [s.for_seed(args.seed) for s in grid(base)]
    (args.out / "specs").mkdir(parents=True, exist_ok=True)
    for s in specs:
        path = args.out / "specs" / f"{run_name(s)}.json"
        path.write_text(json.dumps(s.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(specs)} specs to {args.out / 'specs'}")
    if not args.run:
        return

    data = load_data(base.data)
    rows = []
    for s in specs:
        rep = execute(s, args.out / run_name(s), data=data)
        rows.append(ResultRow(**rep["row"]))
        key = (s.train.strategy, s.noise.ratio, rep["row"]["k"])
        if key in REFERENCE:
            gap = rep["row"]["dice"] - REFERENCE[key]
            print(f"{run_name(s)}: {rep['row']['dice']:.4f} (reference {REFERENCE[key]}, "
                  f"{'within' if abs(gap) <= 0.02 else 'outside'} +/-0.02)")
    table = emit_table(rows)
    (args.out / "table.md").write_text(table)
    print(table)


if __name__ == "__main__":
    main()
