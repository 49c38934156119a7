"""Command line entry point: ``cascade-seg {synth-data,corrupt,train,ablate,report}``.

Exit codes: 0 on success, 2 for invalid flags or configuration, 3 when a
run fails at runtime (or ``report`` finds unreadable run directories).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data as data_mod
from .experiment import (
    DATA_ENV,
    DataSpec,
    ExperimentSpec,
    desk_spec,
    execute,
    full_spec,
    load_data,
    merge_reports,
    read_run,
    run_name,
)
from .metrics import bar_figure, emit_plots, emit_table, save_figure
from .morphology import NoiseSpec, corrupt_dataset

log = logging.getLogger("cascade_seg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _unit(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def _positive(text):
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"{v} must be > 0")
    return v


# ------------------------------------------------------------ run options


def _run_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("experiment")
    g.add_argument("--spec", type=Path, help="JSON experiment spec; flags override its values")
    g.add_argument("--preset", choices=("desk", "full"), default="desk")
    g.add_argument("--data", help=f"dataset root (images/, masks/); defaults to ${DATA_ENV} "
                                  "for the full preset, synthetic shapes otherwise")
    g.add_argument("--size", type=int, help="resize images to SIZE x SIZE")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--out", type=Path, help="output root for run directories")
    g.add_argument("--seeds", type=_ints, help="comma-separated seeds")
    g.add_argument("--seed", type=int, help="single seed (same as --seeds N)")

    g = p.add_argument_group("noise")
    g.add_argument("--noise-ratio", type=_unit)
    g.add_argument("--noise-min", type=int, help="smallest morphology iteration count")
    g.add_argument("--noise-max", type=int, help="largest morphology iteration count")
    g.add_argument("--noise-op", choices=("random", "erode", "dilate"))

    g = p.add_argument_group("training")
    g.add_argument("--strategy", choices=("vanilla", "coteach_small_loss", "ss", "ss_jo"))
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=_positive)
    g.add_argument("--gamma", type=_positive, help="per-epoch learning-rate decay")
    g.add_argument("--k", type=int, help="epoch at which joint optimization starts")
    g.add_argument("--alpha", type=_unit, help="weight of the noisy-label term")
    g.add_argument("--T", dest="temperature", type=_positive, help="sharpening temperature")
    g.add_argument("--jo-scope", choices=("unselected_only", "all_samples"))
    g.add_argument("--peer-count", type=int, choices=(2, 3))
    g.add_argument("--keep-fraction", type=_unit, help="R: fraction of each batch selected")
    g.add_argument("--uncertainty-keep", type=_unit, help="tau: low-uncertainty pool fraction")
    g.add_argument("--criterion", choices=("uncertainty_then_loss", "loss_only"))
    g.add_argument("--no-augment", action="store_true")
    g.add_argument("--label-accuracy", action="store_true",
                   help="also track corrected-label Dice every epoch")
    return p


def build_spec(args) -> ExperimentSpec:
    """Preset (or --spec file), then flag overrides."""
    if args.spec is not None:
        spec = ExperimentSpec.from_dict(json.loads(args.spec.read_text()))
    elif args.preset == "full":
        spec = full_spec()
    else:
        spec = desk_spec()

    data = spec.data
    if args.data is not None:
        # a directory written by synth-data or the real dataset; keep its own size unless asked
        data = replace(data, source="shenzhen", path=args.data, size=args.size)
    elif args.size is not None:
        data = replace(data, size=args.size)
    if args.n_train is not None:
        data = replace(data, n_train=args.n_train)
    if args.n_test is not None:
        data = replace(data, n_test=args.n_test)

    noise = spec.noise
    for flag, fieldname in (("noise_ratio", "ratio"), ("noise_min", "iter_min"),
                            ("noise_max", "iter_max"), ("noise_op", "op_mode")):
        if getattr(args, flag) is not None:
            noise = replace(noise, **{fieldname: getattr(args, flag)})

    t = spec.train
    corr, sel = t.correction, t.selection
    for flag, fieldname in (("k", "jo_start_epoch"), ("alpha", "alpha"),
                            ("temperature", "temperature"), ("jo_scope", "jo_scope"),
                            ("peer_count", "peer_count")):
        if getattr(args, flag) is not None:
            corr = replace(corr, **{fieldname: getattr(args, flag)})
    for flag, fieldname in (("keep_fraction", "keep_fraction"),
                            ("uncertainty_keep", "uncertainty_keep_fraction"),
                            ("criterion", "criterion")):
        if getattr(args, flag) is not None:
            sel = replace(sel, **{fieldname: getattr(args, flag)})
    updates = {k: getattr(args, k) for k in ("strategy", "epochs", "batch_size", "lr", "gamma")
               if getattr(args, k) is not None}
    if args.no_augment:
        updates["augment"] = replace(t.augment, max_rotation=0.0, flip_prob=0.0)
    if args.label_accuracy:
        updates["track_label_accuracy"] = True
    train = replace(t, correction=corr, selection=sel, **updates)

    seeds = spec.seeds
    if args.seeds:
        seeds = args.seeds
    if args.seed is not None:
        seeds = [args.seed]
    out = str(args.out) if args.out is not None else spec.out_dir
    return ExperimentSpec(data=data, noise=noise, train=train, out_dir=out, seeds=list(seeds))


def _run_seeds(spec: ExperimentSpec, data=None) -> list[dict]:
    data = data if data is not None else load_data(spec.data)
    reports = []
    for seed in spec.seeds:
        one = spec.for_seed(seed)
        run_dir = Path(one.out_dir) / run_name(one)
        rep = execute(one, run_dir, data=data)
        rep["run_dir"] = str(run_dir)
        print(f"{run_dir}: dice {rep['row']['dice']:.4f}")
        reports.append(rep)
    return reports


# ---------------------------------------------------------------- commands


def cmd_synth_data(args) -> int:
    if args.n_test >= args.count:
        raise ValueError(f"--n-test {args.n_test} leaves no training samples out of {args.count}")
    samples = data_mod.synth_shapes(args.count, args.size, args.seed)
    manifest = data_mod.make_manifest([s.id for s in samples], args.count - args.n_test,
                                      args.n_test, source="synthetic", image_size=args.size,
                                      split_seed=args.seed)
    data_mod.write_dataset(samples, args.out, manifest)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    spec = DataSpec("shenzhen", args.data, size=None)
    train, _ = load_data(spec)
    noise = NoiseSpec(args.noise_ratio, args.noise_min, args.noise_max, args.noise_op, args.seed)
    masks, clog = corrupt_dataset([s.clean_mask for s in train], noise, ids=[s.id for s in train])
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s, m in zip(train, masks):
        data_mod.save_png(m.astype("uint8") * 255, out / "masks" / f"{s.id}.png")
    clog.write(out / "corruption.jsonl")
    print(f"corrupted {len(clog.ids())} of {len(train)} training masks -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = build_spec(args)
    _run_seeds(spec)
    return EXIT_OK


def _sweep(args, base: ExperimentSpec, kind: str):
    """(label, spec) pairs for one ablation."""
    t, n = base.train, base.noise
    if kind == "alpha":
        t = replace(t, strategy="ss_jo")
        return [(f"alpha={v:g}", v, replace(base, train=replace(
            t, correction=replace(t.correction, alpha=v)))) for v in args.values]
    if kind == "k":
        t = replace(t, strategy="ss_jo")
        return [(f"k={v:g}", v, replace(base, train=replace(
            t, correction=replace(t.correction, jo_start_epoch=int(v))))) for v in args.values]
    if kind == "selection":
        t = replace(t, strategy="ss")
        return [(c, c, replace(base, train=replace(t, selection=replace(t.selection, criterion=c))))
                for c in args.criteria]
    if kind == "noise100":
        out = []
        for level in args.levels:
            noisy = replace(n, ratio=1.0, iter_min=level, iter_max=level)
            for strategy in ("vanilla", "ss"):
                out.append((f"{strategy} n={level}", f"{strategy}@{level}",
                            replace(base, noise=noisy, train=replace(t, strategy=strategy))))
        return out
    raise ValueError(f"unknown ablation {kind!r}")


def cmd_ablate(args) -> int:
    base = build_spec(args)
    root = Path(base.out_dir) / f"ablate_{args.kind}"
    data = load_data(base.data)
    means, histories, rows = {}, {}, []
    for label, key, spec in _sweep(args, base, args.kind):
        spec = replace(spec, out_dir=str(root))
        reports = _run_seeds(spec, data)
        dices = [r["row"]["dice"] for r in reports]
        means[key] = sum(dices) / len(dices)
        histories[label] = read_run(reports[0]["run_dir"])["history"]
        rows.extend(merge_reports([r["run_dir"] for r in reports])[0])
    table = emit_table(rows, "markdown")
    (root / "table.md").write_text(table)
    summary = {str(k): v for k, v in means.items()}
    (root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if args.kind in ("alpha", "k"):
        emit_plots(histories, root, name=args.kind, sweeps={args.kind: means})
    else:
        save_figure(bar_figure(means, xlabel=args.kind), root / f"{args.kind}_bars.svg")
        emit_plots(histories, root, name=args.kind)
    print(table, end="")
    for k, v in means.items():
        print(f"mean dice {k}: {v:.4f}")
    return EXIT_OK


def _find_runs(paths):
    found = []
    for p in map(Path, paths):
        if (p / "config.json").exists() or not p.is_dir():
            found.append(p)
            continue
        nested = sorted(c.parent for c in p.rglob("config.json"))
        found.extend(nested or [p])
    return found


def cmd_report(args) -> int:
    rows, errors = merge_reports(_find_runs(args.runs))
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    if rows:
        text = emit_table(rows, args.format)
        if args.out:
            Path(args.out).write_text(text)
        print(text, end="")
    elif not errors:
        print("error: no runs found", file=sys.stderr)
    return EXIT_RUNTIME if errors or not rows else EXIT_OK


# -------------------------------------------------------------------- main


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-seg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic two-lobe dataset to disk")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=int, default=300)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-test", type=int, default=None,
                   help="held-out samples (default: a third of --count)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("corrupt", help="write morphologically corrupted training masks")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--noise-ratio", type=_unit, default=0.5)
    p.add_argument("--noise-min", type=int, default=5)
    p.add_argument("--noise-max", type=int, default=15)
    p.add_argument("--noise-op", choices=("random", "erode", "dilate"), default="random")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    opts = _run_options()
    p = sub.add_parser("train", parents=[opts], help="train one configuration per seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="sweep one factor and tabulate mean Dice")
    abl = p.add_subparsers(dest="kind", required=True)
    a = abl.add_parser("alpha", parents=[opts])
    a.add_argument("--values", type=_floats, default=[0.0, 0.5, 1.0])
    a = abl.add_parser("k", parents=[opts])
    a.add_argument("--values", type=_ints, default=[10, 20])
    a = abl.add_parser("selection", parents=[opts])
    a.add_argument("--criteria", type=lambda s: s.split(","),
                   default=["loss_only", "uncertainty_then_loss"])
    a = abl.add_parser("noise100", parents=[opts])
    a.add_argument("--levels", type=_ints, default=[5, 20])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge run directories into one results table")
    p.add_argument("runs", nargs="+", help="run directories or roots to search")
    p.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def _validate(args, parser):
    if getattr(args, "kind", None) == "alpha":
        bad = [v for v in args.values if not 0 <= v <= 1]
        if bad:
            parser.error(f"alpha values must lie in [0, 1], got {bad}")
    if getattr(args, "kind", None) == "selection":
        bad = set(args.criteria) - {"loss_only", "uncertainty_then_loss"}
        if bad:
            parser.error(f"unknown selection criteria {sorted(bad)}")
    if args.command == "synth-data" and args.n_test is None:
        args.n_test = args.count // 3


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    _validate(args, parser)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, json.JSONDecodeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("run failed", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
