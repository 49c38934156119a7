"""Label correction from peer predictions and the joint loss.

Functions accept numpy arrays or torch tensors and return the same kind.
The class axis is ``dim`` (last axis by default, i.e. H x W x L maps; the
trainer passes ``dim=1`` for N x L x H x W tensors).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-7
SCOPES = ("unselected_only", "all_samples")


@dataclass(frozen=True)
class CorrectionConfig:
    temperature: float = 0.5
    alpha: float = 0.5  # weight on the original (noisy) label term
    jo_scope: str = "unselected_only"
    jo_start_epoch: int = 20
    peer_count: int = 2  # 3 averages all members, including the target
    hard_targets: bool = False  # argmax one-hot of the corrected label

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.jo_scope not in SCOPES:
            raise ValueError(f"jo_scope must be one of {SCOPES}, got {self.jo_scope!r}")
        if self.jo_start_epoch < 0:
            raise ValueError("jo_start_epoch must be >= 0")
        if self.peer_count not in (2, 3):
            raise ValueError("peer_count must be 2 or 3")


def _as_tensor(x):
    if torch.is_tensor(x):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _back(t, was_numpy):
    return t.numpy() if was_numpy else t


def average_peer_prediction(p_b, p_c):
    a, np_a = _as_tensor(p_b)
    b, _ = _as_tensor(p_c)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _back((a + b) / 2, np_a)


def sharpen(q, temperature: float, dim: int = -1):
    """q_i^(1/T) / sum_j q_j^(1/T) along the class axis."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    t, was_np = _as_tensor(q)
    if temperature == 1:
        return _back(t.clone(), was_np)
    # divide by the per-pixel max first so small T cannot underflow to 0/0
    m = t.amax(dim=dim, keepdim=True)
    if bool((m <= 0).any()):
        raise ValueError("sharpen needs a valid distribution (found an all-zero pixel)")
    powered = (t / m) ** (1.0 / temperature)
    return _back(powered / powered.sum(dim=dim, keepdim=True), was_np)


def corrected_label(peer_probs, temperature: float, dim: int = -1):
    """Sharpened average of the peer probability maps."""
    peer_probs = list(peer_probs)
    if len(peer_probs) == 2:
        q = average_peer_prediction(*peer_probs)
    else:
        ts = [_as_tensor(p) for p in peer_probs]
        q = _back(sum(t for t, _ in ts) / len(ts), ts[0][1])
    return sharpen(q, temperature, dim=dim)


def soft_cross_entropy(pred, target, dim: int = -1):
    """Mean over pixels of -sum_j target_j log pred_j.

    ``pred`` and ``target`` are probability maps of the same shape. For
    batched N x L x H x W input (``dim=1``) one value per sample is returned.
    """
    p, was_np = _as_tensor(pred)
    y, _ = _as_tensor(target)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    per_pixel = -(y * torch.log(p.clamp(EPS, 1 - EPS))).sum(dim=dim)
    if dim in (1, -3) and p.ndim == 4:
        out = per_pixel.flatten(1).mean(1)
    else:
        out = per_pixel.mean()
    if was_np:
        return out.numpy() if out.ndim else float(out)
    return out


def one_hot(label, classes: int = 2, dim: int = -1):
    t, was_np = _as_tensor(label)
    oh = torch.nn.functional.one_hot(t.long(), classes).to(torch.float64 if was_np else torch.float32)
    if dim != -1:
        oh = oh.movedim(-1, dim)
    return _back(oh, was_np)


def joint_loss(pred, noisy, corrected, alpha: float, dim: int = -1):
    """alpha * CE(pred, noisy) + (1 - alpha) * CE(pred, corrected)."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    p, _ = _as_tensor(pred)
    classes = p.shape[dim]
    noisy_oh = one_hot(noisy, classes, dim=dim)
    if torch.is_tensor(noisy_oh) and torch.is_tensor(p):
        noisy_oh = noisy_oh.to(p.dtype)
    ce_noisy = soft_cross_entropy(pred, noisy_oh, dim=dim)
    ce_corr = soft_cross_entropy(pred, corrected, dim=dim)
    return alpha * ce_noisy + (1 - alpha) * ce_corr
