"""Annotation noise by morphological erosion / dilation of clean masks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

OPS = ("erode", "dilate")
MODES = ("erode", "dilate", "random")


def structuring_element(connectivity: int = 8) -> np.ndarray:
    """3x3 element: square for 8-connectivity, cross for 4-connectivity."""
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2 or min(mask.shape) < 1:
        raise ValueError(f"mask must be a non-empty 2-D grid, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return mask


def erode(mask, iterations: int, connectivity: int = 8) -> np.ndarray:
    """Binary erosion. Pixels outside the grid count as background."""
    mask = check_mask(mask)
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if iterations == 0:
        # scipy treats iterations=0 as "until convergence"
        return mask.astype(np.uint8)
    out = ndimage.binary_erosion(
        mask.astype(bool),
        structure=structuring_element(connectivity),
        iterations=iterations,
        border_value=0,
    )
    return out.astype(np.uint8)


def dilate(mask, iterations: int, connectivity: int = 8) -> np.ndarray:
    mask = check_mask(mask)
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if iterations == 0:
        return mask.astype(np.uint8)
    out = ndimage.binary_dilation(
        mask.astype(bool),
        structure=structuring_element(connectivity),
        iterations=iterations,
    )
    return out.astype(np.uint8)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class NoiseSpec:
    """Which fraction of training masks to corrupt and how hard.

    ``ratio`` is the fraction of samples corrupted; each corrupted mask gets
    ``n`` erosion or dilation iterations with ``n`` uniform on
    ``[iter_min, iter_max]``.
    """

    ratio: float = 0.5
    iter_min: int = 5
    iter_max: int = 15
    op_mode: str = "random"
    seed: int = 0
    connectivity: int = 8

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"noise ratio must lie in [0, 1], got {self.ratio}")
        if not 1 <= self.iter_min <= self.iter_max:
            raise ValueError(
                f"need 1 <= iter_min <= iter_max, got {self.iter_min}, {self.iter_max}"
            )
        if self.op_mode not in MODES:
            raise ValueError(f"op_mode must be one of {MODES}, got {self.op_mode!r}")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")

    def n_corrupted(self, n_samples: int) -> int:
        return round_half_up(self.ratio * n_samples)


@dataclass
class CorruptionEntry:
    id: str
    op: str
    n: int
    dice_before: float
    dice_vs_clean: float


@dataclass
class CorruptionLog:
    entries: list[CorruptionEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> set[str]:
        return {e.id for e in self.entries}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.entries)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "CorruptionLog":
        entries = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                entries.append(CorruptionEntry(**json.loads(line)))
        return cls(entries)


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    # local copy to keep this module free of the metrics import
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def corrupt_dataset(masks, spec: NoiseSpec, ids=None):
    """Corrupt exactly ``round(ratio * N)`` masks, chosen at random.

    Returns the new mask list (untouched masks are the input objects) and a
    CorruptionLog sorted by position in the input list.
    """
    masks = list(masks)
    if not masks:
        raise ValueError("masks must be non-empty")
    if ids is None:
        ids = [str(i) for i in range(len(masks))]
    if len(ids) != len(masks):
        raise ValueError("ids and masks differ in length")

    rng = np.random.default_rng(spec.seed)
    n_bad = spec.n_corrupted(len(masks))
    chosen = np.sort(rng.choice(len(masks), size=n_bad, replace=False))

    out = list(masks)
    log = CorruptionLog()
    for i in chosen:
        if spec.op_mode == "random":
            op = OPS[int(rng.integers(2))]
        else:
            op = spec.op_mode
        n = int(rng.integers(spec.iter_min, spec.iter_max + 1))
        fn = erode if op == "erode" else dilate
        clean = check_mask(masks[i])
        noisy = fn(clean, n, spec.connectivity)
        out[i] = noisy
        log.entries.append(
            CorruptionEntry(
                id=str(ids[i]),
                op=op,
                n=n,
                dice_before=1.0,
                dice_vs_clean=_dice(clean, noisy),
            )
        )
    return out, log
