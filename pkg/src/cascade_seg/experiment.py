"""Run directories, experiment specs and the desk-scale ablation grid."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .correction import CorrectionConfig
from .metrics import ResultRow
from .model import DESK, FULL, save_checkpoint
from .morphology import NoiseSpec, corrupt_dataset
from .trainer import TrainConfig, fit, label_report

log = logging.getLogger(__name__)

DATA_ENV = "CASCADE_SEG_DATA"


@dataclass
class DataSpec:
    source: str = "synthetic"  # or "shenzhen"
    path: str | None = None
    n_train: int = 200
    n_test: int = 100
    size: int | None = 64  # None: keep the size recorded in an on-disk manifest
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "shenzhen"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.size is None and self.source == "synthetic":
            raise ValueError("synthetic data needs an explicit size")
        if (self.size is not None and self.size < 1) or self.n_train < 1 or self.n_test < 1:
            raise ValueError("data sizes must be positive")


@dataclass
class ExperimentSpec:
    data: DataSpec = field(default_factory=DataSpec)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(ratio=0.0))
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [0])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        return cls(
            data=DataSpec(**d.get("data", {})),
            noise=NoiseSpec(**d.get("noise", {"ratio": 0.0})),
            train=TrainConfig.from_dict(d.get("train", {})),
            out_dir=d.get("out_dir", "runs"),
            seeds=list(d.get("seeds", [0])),
        )

    def for_seed(self, seed: int) -> "ExperimentSpec":
        """Single-seed spec: the seed drives both the noise draw and training."""
        return replace(self, seeds=[seed], noise=replace(self.noise, seed=seed),
                       train=replace(self.train, seed=seed))


def desk_spec(**overrides) -> ExperimentSpec:
    """Desk-scale preset: 200/100 synthetic 64x64 samples, depth-3 base-8
    U-Nets, 30 epochs of batch 16, noise levels 3..8."""
    # 0.904**30 ~= 0.97**100: the learning rate ends at the same fraction of
    # its start as in the full-scale schedule
    train = TrainConfig(
        epochs=30, batch_size=16, lr=0.05, gamma=0.904, model=DESK,
        correction=CorrectionConfig(jo_start_epoch=10), track_label_accuracy=False,
    )
    spec = ExperimentSpec(
        data=DataSpec("synthetic", None, 200, 100, 64, 0),
        noise=NoiseSpec(ratio=0.5, iter_min=3, iter_max=8),
        train=train,
    )
    return replace(spec, **overrides)


def full_spec(path: str | None = None, **overrides) -> ExperimentSpec:
    """Full-scale recipe: Shenzhen 396/170 split at 256x256, 100 epochs of
    batch 32, lr 0.001, noise levels 5..15."""
    train = TrainConfig(epochs=100, batch_size=32, lr=1e-3, model=FULL,
                        correction=CorrectionConfig(jo_start_epoch=20))
    spec = ExperimentSpec(
        data=DataSpec("shenzhen", path, data_mod.SHENZHEN_TRAIN, data_mod.SHENZHEN_TEST, 256, 0),
        noise=NoiseSpec(ratio=0.5, iter_min=5, iter_max=15),
        train=train,
    )
    return replace(spec, **overrides)


# -------------------------------------------------------------------- data


def load_data(spec: DataSpec):
    """(train, test) sample lists; train masks are still clean here."""
    if spec.source == "synthetic":
        samples = data_mod.synth_shapes(spec.n_train + spec.n_test, spec.size, spec.seed)
        manifest = data_mod.make_manifest([s.id for s in samples], spec.n_train, spec.n_test,
                                          source="synthetic", image_size=spec.size,
                                          split_seed=spec.seed)
        return data_mod.split(samples, manifest)
    root = spec.path or os.environ.get(DATA_ENV)
    if not root:
        raise ValueError(f"shenzhen source needs a data path (flag or ${DATA_ENV})")
    manifest_path = Path(root) / "manifest.json"
    if manifest_path.exists():
        manifest = data_mod.DatasetManifest.load(manifest_path)
        if spec.size is not None:
            manifest = replace(manifest, image_size=spec.size)
    else:
        manifest = data_mod.make_manifest(data_mod.scan_ids(root), spec.n_train, spec.n_test,
                                          image_size=spec.size or 256, split_seed=spec.seed)
    samples = data_mod.load_shenzhen(root, manifest)
    return data_mod.split(samples, manifest)


def apply_noise(train, noise: NoiseSpec):
    masks, clog = corrupt_dataset([s.clean_mask for s in train], noise, ids=[s.id for s in train])
    noisy = [replace(s, train_mask=m) for s, m in zip(train, masks)]
    return noisy, clog


# ------------------------------------------------------------------- runs


def _canonical(d) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(snapshot: dict) -> str:
    """Hash of a run snapshot, ignoring seeds and output location."""
    d = json.loads(_canonical(snapshot))
    d.pop("out_dir", None)
    d.pop("seeds", None)
    d.get("noise", {}).pop("seed", None)
    d.get("train", {}).pop("seed", None)
    return hashlib.sha256(_canonical(d).encode()).hexdigest()[:16]


def noise_level(noise: NoiseSpec) -> str:
    return "-" if noise.ratio == 0 else f"{noise.iter_min}-{noise.iter_max}"


def run_name(spec: ExperimentSpec) -> str:
    t = spec.train
    name = f"{t.strategy}_r{spec.noise.ratio:g}"
    if t.strategy == "ss_jo":
        name += f"_k{t.jo_start_epoch}_a{t.correction.alpha:g}"
    if t.strategy in ("ss", "ss_jo") and t.selection.criterion != "uncertainty_then_loss":
        name += f"_{t.selection.criterion}"
    return f"{name}_s{t.seed}"


def execute(spec: ExperimentSpec, run_dir=None, data=None, checkpoint=True) -> dict:
    """Run one seed of ``spec`` and write its run directory.

    ``data`` may pass preloaded clean (train, test) lists to skip loading.
    Returns the report dict also written to ``report.json``.
    """
    if len(spec.seeds) != 1:
        raise ValueError("execute() runs a single seed; use for_seed()")
    train_clean, test = data if data is not None else load_data(spec.data)
    spec.train.model.check_input(*train_clean[0].shape)
    run_dir = Path(run_dir or Path(spec.out_dir) / run_name(spec))
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = spec.to_dict()
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")

    train, clog = apply_noise(train_clean, spec.noise)
    clog.write(run_dir / "corruption.jsonl")

    hist_path = run_dir / "history.jsonl"
    hist_path.write_text("")

    def on_epoch(state):
        with hist_path.open("a") as fh:
            fh.write(json.dumps(state.history[-1], sort_keys=True) + "\n")

    t0 = time.perf_counter()
    state = fit(spec.train, train, test, noisy_ids=clog.ids(), callback=on_epoch)
    runtime = time.perf_counter() - t0

    t = spec.train
    final = state.history[-1]["test_dice"] if state.history else float("nan")
    row = ResultRow(
        noise_ratio=spec.noise.ratio,
        noise_level=noise_level(spec.noise),
        strategy=t.strategy,
        k=t.jo_start_epoch if t.strategy == "ss_jo" else None,
        dice=final,
        seed=t.seed,
        runtime_s=runtime,
    )
    report = {"row": asdict(row), "config_hash": config_hash(snapshot),
              "alpha": t.correction.alpha, "criterion": t.effective_selection.criterion}
    if len(state.members) == 3 and state.history:
        acc = label_report(state, train)
        report["label_accuracy"] = {"corrected_dice": acc.corrected_dice,
                                    "noisy_dice": acc.noisy_dice}
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if checkpoint:
        save_checkpoint(state.trinet, run_dir / "checkpoints" / "final", state.epoch,
                        {"config_hash": report["config_hash"]})
    return report


class RunDirError(Exception):
    pass


def read_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    problems = [name for name in ("config.json", "history.jsonl", "report.json")
                if not (run_dir / name).exists()]
    if problems:
        raise RunDirError(f"{run_dir}: missing {', '.join(problems)}")
    report = json.loads((run_dir / "report.json").read_text())
    report["history"] = [json.loads(l) for l in (run_dir / "history.jsonl").read_text().splitlines()
                         if l.strip()]
    report["run_dir"] = str(run_dir)
    return report


def merge_reports(run_dirs):
    """Rows from several run dirs, deduplicated by (config hash, seed).

    Returns (rows, errors) where errors lists unreadable run dirs.
    """
    rows, errors, seen = [], [], set()
    for d in run_dirs:
        try:
            rep = read_run(d)
        except (RunDirError, json.JSONDecodeError) as e:
            errors.append(str(e))
            continue
        key = (rep["config_hash"], rep["row"]["seed"])
        if key in seen:
            continue
        seen.add(key)
        rows.append(ResultRow(**rep["row"]))
    return rows, errors


# ----------------------------------------------------------- desk ablation


@dataclass
class Arm:
    """One configuration of the desk grid, run for every seed."""

    name: str
    strategy: str
    ratio: float = 0.5
    alpha: float = 0.5
    criterion: str = "uncertainty_then_loss"
    k: int | None = None

    def spec(self, base: ExperimentSpec, seed: int) -> ExperimentSpec:
        t = base.train
        corr = replace(t.correction, alpha=self.alpha,
                       jo_start_epoch=t.jo_start_epoch if self.k is None else self.k)
        train = replace(t, strategy=self.strategy, correction=corr,
                        selection=replace(t.selection, criterion=self.criterion))
        spec = replace(base, noise=replace(base.noise, ratio=self.ratio), train=train)
        return spec.for_seed(seed)


DESK_ARMS = (
    Arm("vanilla_50", "vanilla"),
    Arm("ss_50", "ss"),
    Arm("ss_jo_50", "ss_jo"),
    Arm("loss_only_50", "coteach_small_loss"),
    Arm("ss_jo_50_alpha0", "ss_jo", alpha=0.0),
    Arm("ss_jo_50_alpha1", "ss_jo", alpha=1.0),
    Arm("vanilla_100", "vanilla", ratio=1.0),
    Arm("ss_100", "ss", ratio=1.0),
)


def run_grid(arms, seeds, base: ExperimentSpec | None = None, out_dir=None) -> dict:
    """Run every arm for every seed; returns ``{arm: [report per seed]}``.

    Without ``out_dir`` run directories go to a temporary location.
    """
    base = base or desk_spec()
    results = {a.name: [] for a in arms}
    data = load_data(base.data)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(out_dir or tmp)
        for seed in seeds:
            for arm in arms:
                run_dir = root / arm.name / f"seed{seed}"
                rep = execute(arm.spec(base, seed), run_dir, data=data, checkpoint=False)
                rep["history"] = read_run(run_dir)["history"]
                log.info("%s seed %d: dice %.4f", arm.name, seed, rep["row"]["dice"])
                results[arm.name].append(rep)
    return results


def mean_dice(reports) -> float:
    return float(np.mean([r["row"]["dice"] for r in reports]))


def grid_table(results: dict, arms=DESK_ARMS) -> str:
    """Markdown table with one row per arm: its settings, per-seed Dice, mean."""
    by_name = {a.name: a for a in arms}
    lines = ["| arm | strategy | noise | alpha | criterion | dice per seed | mean |",
             "|---|---|---|---|---|---|---|"]
    for name, reps in results.items():
        arm = by_name[name]
        crit = "-" if arm.strategy == "vanilla" else (reps[0]["criterion"] if reps else arm.criterion)
        alpha = f"{arm.alpha:g}" if arm.strategy == "ss_jo" else "-"
        seeds = ", ".join(f"{r['row']['dice']:.4f}" for r in reps)
        lines.append(f"| {name} | {arm.strategy} | {arm.ratio:g} | {alpha} | {crit} | {seeds} "
                     f"| {mean_dice(reps):.4f} |")
    return "\n".join(lines) + "\n"


def load_grid(arms, seeds, out_dir) -> dict:
    """Read a finished :func:`run_grid` output back as ``{arm: [report]}``."""
    results = {}
    for arm in arms:
        results[arm.name] = [read_run(Path(out_dir) / arm.name / f"seed{s}") for s in seeds]
    return results


@dataclass
class Criterion:
    name: str
    passed: bool
    detail: str


def desk_criteria(results: dict) -> list[Criterion]:
    """Evaluate the desk-scale ordering checks on :data:`DESK_ARMS` results."""
    m = {name: mean_dice(reps) for name, reps in results.items()}
    out = []

    jo, ss, van = m["ss_jo_50"], m["ss_50"], m["vanilla_50"]
    out.append(Criterion(
        "ordering at 50% noise: ss_jo - ss >= 0.01 and ss - vanilla >= 0.01",
        jo - ss >= 0.01 and ss - van >= 0.01,
        f"vanilla {van:.4f}, ss {ss:.4f}, ss_jo {jo:.4f} "
        f"(gaps {ss - van:+.4f}, {jo - ss:+.4f})"))

    lo = m["loss_only_50"]
    out.append(Criterion(
        "selection criteria: uncertainty_then_loss >= loss_only",
        ss >= lo, f"uncertainty_then_loss {ss:.4f}, loss_only {lo:.4f}, margin {ss - lo:+.4f}"))

    acc = [r["label_accuracy"] for r in results["ss_jo_50"]]
    corr = float(np.mean([a["corrected_dice"] for a in acc]))
    noisy = float(np.mean([a["noisy_dice"] for a in acc]))
    out.append(Criterion(
        "label quality: corrected-label dice - noisy-label dice >= 0.02",
        corr - noisy >= 0.02, f"corrected {corr:.4f}, noisy {noisy:.4f}, gain {corr - noisy:+.4f}"))

    v100, s100 = m["vanilla_100"], m["ss_100"]
    out.append(Criterion(
        "100% noise: ss <= vanilla", s100 <= v100, f"vanilla {v100:.4f}, ss {s100:.4f}"))

    a0, a1 = m["ss_jo_50_alpha0"], m["ss_jo_50_alpha1"]
    out.append(Criterion(
        "alpha sweep: alpha=0.5 is the best of {0, 0.5, 1}",
        jo >= max(a0, a1), f"alpha=0 {a0:.4f}, alpha=0.5 {jo:.4f}, alpha=1 {a1:.4f}"))
    return out
