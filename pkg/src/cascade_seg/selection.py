"""Committee sample selection: drop samples the two peers disagree on, then
keep the small-loss part of what is left."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-7
CRITERIA = ("uncertainty_then_loss", "loss_only")
PEERS = {"A": ("B", "C"), "B": ("C", "A"), "C": ("A", "B")}


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SampleLossRecord:
    index: int
    loss_A: float
    loss_B: float
    loss_C: float

    def __post_init__(self):
        for v in (self.loss_A, self.loss_B, self.loss_C):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"losses must be finite and >= 0, got {self}")

    def loss(self, member: str) -> float:
        return getattr(self, f"loss_{member}")


@dataclass(frozen=True)
class SelectionConfig:
    keep_fraction: float = 0.5
    uncertainty_keep_fraction: float = 0.75
    criterion: str = "uncertainty_then_loss"

    def __post_init__(self):
        if not 0 < self.keep_fraction <= self.uncertainty_keep_fraction <= 1:
            raise ValueError(
                "need 0 < keep_fraction <= uncertainty_keep_fraction <= 1, got "
                f"{self.keep_fraction}, {self.uncertainty_keep_fraction}"
            )
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")


def per_sample_loss(probs, label) -> float:
    """Mean per-pixel cross-entropy (nats) of an H x W x L probability map
    against a binary / integer label map."""
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label)
    if probs.shape[:-1] != label.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs label {label.shape}")
    p_true = np.take_along_axis(probs, label[..., None].astype(np.int64), axis=-1)[..., 0]
    return float(-np.log(np.clip(p_true, EPS, 1 - EPS)).mean())


def per_sample_loss_torch(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batched version on N x L x H x W probabilities; returns N losses."""
    p_true = probs.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    return -torch.log(p_true.clamp(EPS, 1 - EPS)).flatten(1).mean(1)


def uncertainty(loss_b: float, loss_c: float) -> float:
    return abs(loss_b - loss_c)


def _k_smallest(indices, values, k):
    # ties broken by ascending sample index
    order = sorted(range(len(indices)), key=lambda j: (values[j], indices[j]))
    return [indices[j] for j in order[:k]]


def select_for(target: str, records, config: SelectionConfig = SelectionConfig()) -> list[int]:
    """Sample indices used to update ``target``, decided by its two peers.

    Returns ``floor(keep_fraction * B)`` indices in ascending order.
    """
    records = list(records)
    if not records:
        raise SelectionError("no records to select from")
    if target not in PEERS:
        raise ValueError(f"target must be one of A/B/C, got {target!r}")
    b = len(records)
    n_keep = math.floor(config.keep_fraction * b)
    if n_keep == 0:
        raise SelectionError(
            f"batch of {b} keeps floor({config.keep_fraction} * {b}) = 0 samples"
        )
    p, q = PEERS[target]
    idx = [r.index for r in records]
    score = [(r.loss(p) + r.loss(q)) / 2 for r in records]
    if config.criterion == "uncertainty_then_loss":
        mu = [uncertainty(r.loss(p), r.loss(q)) for r in records]
        n_pool = math.floor(config.uncertainty_keep_fraction * b)
        pool = set(_k_smallest(idx, mu, n_pool))
        keep = [j for j in range(b) if idx[j] in pool]
        idx = [idx[j] for j in keep]
        score = [score[j] for j in keep]
    return sorted(_k_smallest(idx, score, n_keep))


def records_from_losses(losses: dict, indices=None) -> list[SampleLossRecord]:
    """Build records from per-member loss vectors ``{"A": [...], ...}``."""
    n = len(losses["A"])
    if indices is None:
        indices = range(n)
    return [
        SampleLossRecord(int(i), float(losses["A"][j]), float(losses["B"][j]), float(losses["C"][j]))
        for j, i in enumerate(indices)
    ]
