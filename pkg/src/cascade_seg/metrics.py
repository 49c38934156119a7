"""Dice, label-quality summaries, result tables and plots."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

STRATEGY_ORDER = ("vanilla", "coteach_small_loss", "ss", "ss_jo")
CSV_COLUMNS = ("noise_ratio", "noise_level", "strategy", "k", "dice", "seed", "runtime_s")


def dice(a, b) -> float:
    """2|a & b| / (|a| + |b|); two empty masks score 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mean_dice(preds, targets) -> float:
    preds, targets = list(preds), list(targets)
    if not preds:
        raise ValueError("empty prediction set")
    if len(preds) != len(targets):
        raise ValueError("prediction / target count mismatch")
    return float(np.mean([dice(p, t) for p, t in zip(preds, targets)]))


@dataclass
class LabelAccuracy:
    corrected_dice: float
    noisy_dice: float
    deltas: list  # per sample: dice(corrected) - dice(noisy)

    @property
    def improvement(self) -> float:
        return self.corrected_dice - self.noisy_dice


def label_accuracy_report(corrected, noisy, clean) -> LabelAccuracy:
    """Compare end-of-training corrected labels and the noisy training labels
    against the clean masks.

    ``corrected`` holds H x W x L soft labels (argmax is taken) or binary masks.
    """
    corrected, noisy, clean = list(corrected), list(noisy), list(clean)
    if not (len(corrected) == len(noisy) == len(clean)) or not clean:
        raise ValueError("corrected, noisy and clean must be aligned and non-empty")
    corr_masks = []
    for c, m in zip(corrected, clean):
        c = np.asarray(c)
        if c.ndim == np.asarray(m).ndim + 1:
            c = c.argmax(-1)
        corr_masks.append(c)
    d_corr = [dice(c, m) for c, m in zip(corr_masks, clean)]
    d_noisy = [dice(n, m) for n, m in zip(noisy, clean)]
    return LabelAccuracy(
        corrected_dice=float(np.mean(d_corr)),
        noisy_dice=float(np.mean(d_noisy)),
        deltas=[c - n for c, n in zip(d_corr, d_noisy)],
    )


# ------------------------------------------------------------------ tables


@dataclass
class ResultRow:
    noise_ratio: float
    noise_level: str  # e.g. "5-15", "-" without noise
    strategy: str
    k: int | None
    dice: float
    seed: int | None = None
    runtime_s: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice must lie in [0, 1], got {self.dice}")


def _sort_key(row: ResultRow):
    strat = (STRATEGY_ORDER.index(row.strategy) if row.strategy in STRATEGY_ORDER
             else len(STRATEGY_ORDER), row.strategy)
    return (row.noise_ratio, strat, -1 if row.k is None else row.k,
            -1 if row.seed is None else row.seed)


def _fmt(row: ResultRow) -> dict:
    return {
        "noise_ratio": f"{row.noise_ratio:g}",
        "noise_level": row.noise_level,
        "strategy": row.strategy,
        "k": "-" if row.k is None else str(row.k),
        "dice": f"{row.dice:.4f}",
        "seed": "-" if row.seed is None else str(row.seed),
        "runtime_s": "-" if row.runtime_s is None else f"{row.runtime_s:.1f}",
    }


def emit_table(rows, format: str = "markdown") -> str:
    rows = sorted(rows, key=_sort_key)
    if not rows:
        raise ValueError("no rows to emit")
    cells = [_fmt(r) for r in rows]
    if format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(cells)
        return buf.getvalue()
    if format == "markdown":
        lines = ["| " + " | ".join(CSV_COLUMNS) + " |",
                 "|" + "|".join("---" for _ in CSV_COLUMNS) + "|"]
        lines += ["| " + " | ".join(c[k] for k in CSV_COLUMNS) + " |" for c in cells]
        return "\n".join(lines) + "\n"
    if format == "json":
        # numbers go through the same 4-decimal rendering as the text formats
        payload = [
            {k: _parse_cell(k, c[k]) if k != "noise_level" else c[k] for k in CSV_COLUMNS}
            for c in cells
        ]
        return json.dumps(payload, indent=2) + "\n"
    raise ValueError(f"unknown table format {format!r}")


def _parse_cell(key, value):
    if value in ("-", None, ""):
        return None
    if key in ("k", "seed"):
        return int(value)
    if key in ("noise_ratio", "dice", "runtime_s"):
        return float(value)
    return value


def parse_table(text: str, format: str = "markdown") -> list[ResultRow]:
    if format == "json":
        records = json.loads(text)
    elif format == "csv":
        records = [{k: _parse_cell(k, v) for k, v in r.items()}
                   for r in csv.DictReader(io.StringIO(text))]
    elif format == "markdown":
        lines = [l for l in text.splitlines() if l.startswith("|")]
        header = [h.strip() for h in lines[0].strip("|").split("|")]
        records = []
        for line in lines[2:]:
            vals = [v.strip() for v in line.strip("|").split("|")]
            records.append({k: _parse_cell(k, v) for k, v in zip(header, vals)})
    else:
        raise ValueError(f"unknown table format {format!r}")
    out = []
    for r in records:
        r = dict(r)
        if r.get("noise_level") is None:
            r["noise_level"] = "-"
        out.append(ResultRow(**{f.name: r.get(f.name) for f in fields(ResultRow)}))
    return out


def write_table(rows, path, format=None) -> Path:
    path = Path(path)
    format = format or {".csv": "csv", ".json": "json"}.get(path.suffix, "markdown")
    path.write_text(emit_table(rows, format))
    return path


# ------------------------------------------------------------------- plots


def _figure_module():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cascade-seg"
    return plt


def curve_figure(histories: dict, key: str = "test_dice"):
    """One test-Dice-vs-epoch line per named history."""
    plt = _figure_module()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in sorted(histories):
        hist = histories[name]
        ax.plot([h["epoch"] for h in hist], [h[key] for h in hist], marker="o", ms=2,
                label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(key.replace("_", " "))
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def bar_figure(values: dict, xlabel: str, ylabel: str = "test dice"):
    """One labelled bar per key (e.g. alpha or k values)."""
    plt = _figure_module()
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar([str(k) for k in values], list(values.values()), color="0.5")
    ax.set_ylim(max(0.0, min(values.values()) - 0.05), 1.0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    return fig


def save_figure(fig, path) -> Path:
    plt = _figure_module()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return Path(path)


def emit_plots(history, out_dir, name: str = "run", sweeps: dict | None = None) -> list[Path]:
    """Write a test-Dice curve for ``history`` (a list of epoch records, or a
    dict of named histories) plus one bar chart per entry of ``sweeps``
    (``{"alpha": {0: d0, 0.5: d1, ...}}``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not history:
        raise ValueError("empty history")
    histories = history if isinstance(history, dict) else {name: history}
    paths = [save_figure(curve_figure(histories), out_dir / f"{name}_curve.svg")]
    for sweep, values in (sweeps or {}).items():
        paths.append(save_figure(bar_figure(values, xlabel=sweep), out_dir / f"{name}_{sweep}_sweep.svg"))
    return paths


def summarize(values) -> tuple[float, float]:
    values = np.asarray(list(values), dtype=float)
    return float(values.mean()), float(values.std(ddof=0))


def as_dict(row: ResultRow) -> dict:
    return asdict(row)
