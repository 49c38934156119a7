"""Two-stage cascade: committee sample selection, then joint optimization
against original and corrected labels from epoch ``k`` on."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .correction import CorrectionConfig, corrected_label, sharpen
from .data import AugmentConfig, Sample, augment
from .metrics import dice, label_accuracy_report
from .model import MEMBERS, ModelConfig, TriNet, build_trinet, ensemble_predict
from .selection import (
    PEERS,
    SelectionConfig,
    SelectionError,
    per_sample_loss_torch,
    records_from_losses,
    select_for,
)

log = logging.getLogger(__name__)

STRATEGIES = ("vanilla", "coteach_small_loss", "ss", "ss_jo")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    gamma: float = 0.97  # lr at epoch e is lr * gamma**e
    strategy: str = "ss_jo"
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    deterministic: bool = True
    eval_batch_size: int = 64
    track_label_accuracy: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.strategy == "ss_jo" and not 0 <= self.jo_start_epoch <= self.epochs:
            raise ValueError(
                f"jo start epoch k={self.jo_start_epoch} must lie in [0, epochs={self.epochs}]"
            )
        if self.lr <= 0 or not 0 < self.gamma <= 1:
            raise ValueError("need lr > 0 and 0 < gamma <= 1")
        if self.strategy != "vanilla" and int(self.selection.keep_fraction * self.batch_size) < 1:
            raise ValueError(
                f"batch size {self.batch_size} keeps no samples at keep fraction "
                f"{self.selection.keep_fraction}"
            )
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    @property
    def jo_start_epoch(self) -> int:
        return self.correction.jo_start_epoch

    @property
    def members(self) -> tuple[str, ...]:
        return ("A",) if self.strategy == "vanilla" else MEMBERS

    @property
    def effective_selection(self) -> SelectionConfig:
        if self.strategy == "coteach_small_loss":
            return replace(self.selection, criterion="loss_only")
        return self.selection

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** epoch

    def jo_active(self, epoch: int) -> bool:
        return self.strategy == "ss_jo" and epoch >= self.jo_start_epoch

    def member_seeds(self) -> list[int]:
        return [1000 * self.seed + i + 1 for i in range(len(self.members))]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {
            "selection": SelectionConfig,
            "correction": CorrectionConfig,
            "model": ModelConfig,
            "augment": AugmentConfig,
        }
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        return cls(**d)


@dataclass
class TrainState:
    config: TrainConfig
    trinet: TriNet
    epoch: int = 0
    history: list = field(default_factory=list)
    noisy_ids: frozenset = frozenset()
    correction_calls: int = 0  # corrected_label evaluations (per batch per target)

    @property
    def members(self):
        return self.trinet.names


def make_state(config: TrainConfig, noisy_ids=()) -> TrainState:
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)

    def sgd(params):
        return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum,
                               weight_decay=config.weight_decay)

    trinet = build_trinet(config.model, config.member_seeds(), config.members, sgd)
    return TrainState(config, trinet, noisy_ids=frozenset(noisy_ids))


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    ids: list
    images: torch.Tensor  # N x 1 x H x W
    labels: torch.Tensor  # N x H x W (long), the training labels


def stack(samples, label="train_mask") -> Batch:
    images = torch.from_numpy(np.stack([s.image for s in samples])).float().unsqueeze(1)
    labels = torch.from_numpy(np.stack([getattr(s, label) for s in samples]).astype(np.int64))
    return Batch([s.id for s in samples], images, labels)


def epoch_batches(samples, config: TrainConfig, epoch: int, augmentation=True) -> Iterator[Batch]:
    """Shuffled, augmented batches; incomplete trailing batch dropped."""
    order = np.random.default_rng(np.random.SeedSequence([config.seed, 7, epoch])).permutation(
        len(samples))
    b = config.batch_size
    n_batches = len(samples) // b
    if n_batches == 0:
        raise ValueError(f"{len(samples)} training samples cannot fill one batch of {b}")
    for i in range(n_batches):
        chunk = [samples[j] for j in order[i * b:(i + 1) * b]]
        if augmentation:
            chunk = [
                augment(s, np.random.default_rng(
                    np.random.SeedSequence([config.seed, epoch, zlib.crc32(s.id.encode())])),
                    config.augment)
                for s in chunk
            ]
        yield stack(chunk)


# ------------------------------------------------------------------- losses


def nll_per_sample(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels, reduction="none").flatten(1).mean(1)


def joint_per_sample(logits, labels, target_probs, alpha: float) -> torch.Tensor:
    """alpha * CE(noisy) + (1 - alpha) * CE(corrected), per sample."""
    logp = F.log_softmax(logits, dim=1)
    ce_noisy = -logp.gather(1, labels.unsqueeze(1)).squeeze(1).flatten(1).mean(1)
    ce_corr = -(target_probs * logp).sum(1).flatten(1).mean(1)
    return alpha * ce_noisy + (1 - alpha) * ce_corr


def member_loss(logits, labels, chosen, ybar=None, alpha=1.0, scope="unselected_only"):
    """Scalar training loss for one member.

    Without ``ybar`` (selection stage) this is the CE against the training
    labels averaged over the ``chosen`` samples only. With ``ybar`` the
    whole batch contributes: chosen samples keep the plain CE (unless
    ``scope`` is ``all_samples``) and the rest use the joint loss.
    """
    n = labels.shape[0]
    selected = torch.zeros(n, dtype=torch.bool)
    selected[list(chosen)] = True
    if ybar is None:
        per = nll_per_sample(logits, labels)
        return (per * selected).sum() / selected.sum()
    joint = joint_per_sample(logits, labels, ybar, alpha)
    if scope == "all_samples":
        return joint.mean()
    return torch.where(selected, nll_per_sample(logits, labels), joint).mean()


def _set_lr(state: TrainState):
    lr = state.config.lr_at(state.epoch)
    for opt in state.trinet.optimizers.values():
        for g in opt.param_groups:
            g["lr"] = lr
    return lr


def _step(state, name, loss):
    opt = state.trinet.optimizers[name]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()


def _forward_all(state, batch):
    logits = {}
    for name, net in state.trinet.nets.items():
        net.train()
        logits[name] = net(batch.images)
    return logits


def _corrected_for(state, target, probs):
    cfg = state.config.correction
    if cfg.peer_count == 3:
        peers = [probs[m] for m in MEMBERS]
    else:
        peers = [probs[m] for m in PEERS[target]]
    ybar = corrected_label(peers, cfg.temperature, dim=1)
    if cfg.hard_targets:
        ybar = F.one_hot(ybar.argmax(1), ybar.shape[1]).permute(0, 3, 1, 2).to(ybar.dtype)
    state.correction_calls += 1
    return ybar


def _batch_records(state, batch, logits):
    # peer outputs are captured (detached) before any member is updated
    probs = {m: torch.softmax(l.detach(), dim=1) for m, l in logits.items()}
    losses = {m: per_sample_loss_torch(p, batch.labels).numpy() for m, p in probs.items()}
    return probs, losses, records_from_losses(losses)


def _selection(state, batch, records, stats):
    sel_cfg = state.config.effective_selection
    chosen = {}
    for target in state.members:
        try:
            idx = select_for(target, records, sel_cfg)
        except SelectionError as e:
            raise ValueError(f"empty selection: {e}") from e
        chosen[target] = idx
        ids = [batch.ids[i] for i in idx]
        stats["selected"] += len(ids)
        stats["selected_noisy"] += sum(i in state.noisy_ids for i in ids)
    return chosen


def _new_stats(state):
    return {"selected": 0, "selected_noisy": 0, "loss": {m: 0.0 for m in state.members},
            "batches": 0}


def train_epoch_vanilla(state: TrainState, loader) -> TrainState:
    stats = _new_stats(state)
    _set_lr(state)
    for batch in loader:
        logits = _forward_all(state, batch)
        for name, l in logits.items():
            loss = nll_per_sample(l, batch.labels).mean()
            _step(state, name, loss)
            stats["loss"][name] += loss.item()
        stats["batches"] += 1
    return _finish_epoch(state, stats, jo=False)


def train_epoch_ss(state: TrainState, loader) -> TrainState:
    """One epoch where each member learns only from the samples its peers select."""
    if state.config.strategy not in ("ss", "ss_jo", "coteach_small_loss"):
        raise ValueError(f"selection epoch needs a committee strategy, got {state.config.strategy}")
    stats = _new_stats(state)
    _set_lr(state)
    for batch in loader:
        logits = _forward_all(state, batch)
        _, _, records = _batch_records(state, batch, logits)
        chosen = _selection(state, batch, records, stats)
        for name in state.members:
            loss = member_loss(logits[name], batch.labels, chosen[name])
            _step(state, name, loss)
            stats["loss"][name] += loss.item()
        stats["batches"] += 1
    return _finish_epoch(state, stats, jo=False)


def train_epoch_jo(state: TrainState, loader) -> TrainState:
    """Selection continues; the samples in the joint-optimization scope are
    additionally supervised by the corrected labels."""
    cfg = state.config
    if cfg.strategy != "ss_jo" or not cfg.jo_active(state.epoch):
        raise ValueError(f"joint optimization inactive at epoch {state.epoch}")
    alpha, scope = cfg.correction.alpha, cfg.correction.jo_scope
    stats = _new_stats(state)
    _set_lr(state)
    for batch in loader:
        logits = _forward_all(state, batch)
        probs, _, records = _batch_records(state, batch, logits)
        chosen = _selection(state, batch, records, stats)
        for name in state.members:
            with torch.no_grad():
                ybar = _corrected_for(state, name, probs)
            loss = member_loss(logits[name], batch.labels, chosen[name], ybar, alpha, scope)
            _step(state, name, loss)
            stats["loss"][name] += loss.item()
        stats["batches"] += 1
    return _finish_epoch(state, stats, jo=True)


def _finish_epoch(state, stats, jo):
    n = max(stats["batches"], 1)
    rec = {
        "epoch": state.epoch,
        "lr": state.config.lr_at(state.epoch),
        "stage": "jo" if jo else ("vanilla" if state.config.strategy == "vanilla" else "ss"),
        "train_loss": {m: v / n for m, v in stats["loss"].items()},
    }
    if stats["selected"]:
        rec["selected_noisy_frac"] = stats["selected_noisy"] / stats["selected"]
    state.history.append(rec)
    state.epoch += 1
    return state


# --------------------------------------------------------------- evaluation


def predict_masks(trinet: TriNet, samples, batch_size=64) -> list[np.ndarray]:
    out = []
    for i in range(0, len(samples), batch_size):
        imgs = np.stack([s.image for s in samples[i:i + batch_size]])
        out.extend(ensemble_predict(trinet, imgs).argmax(-1).astype(np.uint8))
    return out


def evaluate(trinet: TriNet, test_set, batch_size=64) -> float:
    """Mean Dice of argmax(ensemble) against the clean masks."""
    test_set = list(test_set)
    if not test_set:
        raise ValueError("empty test set")
    preds = predict_masks(trinet, test_set, batch_size)
    return float(np.mean([dice(p, s.clean_mask) for p, s in zip(preds, test_set)]))


def corrected_labels(trinet: TriNet, samples, temperature: float, batch_size=64) -> list:
    """End-of-training corrected labels: sharpened committee average, H x W x L each."""
    out = []
    for i in range(0, len(samples), batch_size):
        imgs = np.stack([s.image for s in samples[i:i + batch_size]])
        out.extend(sharpen(ensemble_predict(trinet, imgs), temperature))
    return out


def label_report(state: TrainState, train_set):
    train_set = list(train_set)
    ybar = corrected_labels(state.trinet, train_set, state.config.correction.temperature,
                            state.config.eval_batch_size)
    return label_accuracy_report(ybar, [s.train_mask for s in train_set],
                                 [s.clean_mask for s in train_set])


# ---------------------------------------------------------------------- run


def train_one_epoch(state: TrainState, train_set) -> TrainState:
    batches = epoch_batches(train_set, state.config, state.epoch)
    cfg = state.config
    if cfg.strategy == "vanilla":
        return train_epoch_vanilla(state, batches)
    if cfg.jo_active(state.epoch):
        return train_epoch_jo(state, batches)
    return train_epoch_ss(state, batches)


def fit(config: TrainConfig, train_set, test_set, noisy_ids=(), callback=None) -> TrainState:
    train_set, test_set = list(train_set), list(test_set)
    if train_set:
        config.model.check_input(*train_set[0].shape)
    state = make_state(config, noisy_ids)
    for _ in range(config.epochs):
        t0 = time.perf_counter()
        train_one_epoch(state, train_set)
        rec = state.history[-1]
        rec["test_dice"] = evaluate(state.trinet, test_set, config.eval_batch_size)
        if config.track_label_accuracy and len(state.members) == 3:
            rec["corrected_label_dice"] = label_report(state, train_set).corrected_dice
        rec["seconds"] = time.perf_counter() - t0
        log.info("epoch %d %s test dice %.4f", rec["epoch"], rec["stage"], rec["test_dice"])
        if callback is not None:
            callback(state)
    return state


def run(config: TrainConfig, train_set, test_set, noisy_ids=()):
    """Train per ``config``; returns (committee, per-epoch history)."""
    state = fit(config, train_set, test_set, noisy_ids)
    return state.trinet, state.history
