"""U-Net segmenter and the three-network committee."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

MEMBERS = ("A", "B", "C")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    out_classes: int = 2
    depth: int = 3
    base_channels: int = 8
    # The reference U-Net has no normalization layers; "batch" adds BatchNorm
    # after every conv.
    norm: str = "batch"
    input_size: int | None = None

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.out_classes < 2:
            raise ConfigError(f"invalid model config {self}")
        if self.norm not in ("none", "batch"):
            raise ConfigError(f"norm must be 'none' or 'batch', got {self.norm!r}")
        if self.input_size is not None:
            self.check_input(self.input_size, self.input_size)

    def check_input(self, h: int, w: int) -> None:
        step = 2 ** self.depth
        if h % step or w % step:
            raise ConfigError(
                f"input {h}x{w} is not divisible by 2^depth = {step} (depth {self.depth})"
            )


DESK = ModelConfig(depth=3, base_channels=8, input_size=64)
FULL = ModelConfig(depth=4, base_channels=64, input_size=256)


def _double_conv(cin, cout, norm):
    layers = []
    for c_in in (cin, cout):
        layers.append(nn.Conv2d(c_in, cout, 3, padding=1, bias=norm == "none"))
        if norm == "batch":
            layers.append(nn.BatchNorm2d(cout))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """Encoder-decoder with skip connections; returns per-pixel class logits
    of shape N x L x H x W."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        chans = [c * 2 ** i for i in range(config.depth + 1)]
        self.down = nn.ModuleList()
        cin = config.in_channels
        for ch in chans[:-1]:
            self.down.append(_double_conv(cin, ch, config.norm))
            cin = ch
        self.bottom = _double_conv(chans[-2], chans[-1], config.norm)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(config.depth)):
            self.up.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2))
            self.dec.append(_double_conv(chans[i] * 2, chans[i], config.norm))
        self.head = nn.Conv2d(chans[0], config.out_classes, 1)
        # NHWC convolutions are markedly faster on CPU for these small widths
        self.to(memory_format=torch.channels_last)

    def forward(self, x):
        self.config.check_input(x.shape[-2], x.shape[-1])
        x = x.contiguous(memory_format=torch.channels_last)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def build_unet(config: ModelConfig, seed: int | None = None) -> UNet:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return UNet(config)
    return UNet(config)


def as_batch(images) -> torch.Tensor:
    """N x H x W (or N x C x H x W) array -> float32 tensor N x C x H x W."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images,
                        dtype=torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(1)
    if x.ndim != 4:
        raise ValueError(f"expected N x H x W or N x C x H x W, got shape {tuple(x.shape)}")
    return x


@torch.no_grad()
def predict_proba(network: nn.Module, images) -> np.ndarray:
    """Softmax class probabilities, channels last: N x H x W x L."""
    x = as_batch(images)
    cfg = getattr(network, "config", None)
    if cfg is not None and x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
    was_training = network.training
    network.eval()
    try:
        p = torch.softmax(network(x), dim=1)
    finally:
        network.train(was_training)
    return p.permute(0, 2, 3, 1).numpy()


@dataclass
class TriNet:
    """Committee of identically built networks, each with its own optimizer.

    Three members (A, B, C) for the robust strategies; the vanilla baseline
    uses a single member A.
    """

    nets: dict
    optimizers: dict
    config: ModelConfig
    seeds: dict

    @property
    def names(self):
        return tuple(self.nets)

    def __getitem__(self, name):
        return self.nets[name]

    def train(self, mode=True):
        for net in self.nets.values():
            net.train(mode)


def build_trinet(config: ModelConfig, seeds, members=MEMBERS, optimizer_factory=None) -> TriNet:
    seeds = list(seeds)
    if len(seeds) != len(members):
        raise ConfigError("need one seed per committee member")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("committee members need distinct init seeds")
    nets = {m: build_unet(config, s) for m, s in zip(members, seeds)}
    opts = {}
    if optimizer_factory is not None:
        opts = {m: optimizer_factory(net.parameters()) for m, net in nets.items()}
    return TriNet(nets, opts, config, dict(zip(members, seeds)))


def ensemble_predict(trinet: TriNet, images) -> np.ndarray:
    """Per-pixel mean of the members' probability maps (N x H x W x L)."""
    probs = [predict_proba(net, images) for net in trinet.nets.values()]
    return np.mean(probs, axis=0)


@torch.no_grad()
def parameter_distance(a: nn.Module, b: nn.Module) -> float:
    return float(sum((p - q).abs().sum() for p, q in zip(a.parameters(), b.parameters())))


def save_checkpoint(trinet: TriNet, directory, epoch: int, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in trinet.nets.items():
        state = {"model": net.state_dict()}
        if name in trinet.optimizers:
            state["optimizer"] = trinet.optimizers[name].state_dict()
        torch.save(state, directory / f"net_{name}.pt")
    manifest = {
        "config": asdict(trinet.config),
        "epoch": epoch,
        "seeds": trinet.seeds,
        "members": list(trinet.names),
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory, optimizer_factory=None) -> tuple[TriNet, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = ModelConfig(**manifest["config"])
    members = manifest["members"]
    trinet = build_trinet(config, [manifest["seeds"][m] for m in members], members,
                          optimizer_factory)
    for name, net in trinet.nets.items():
        state = torch.load(directory / f"net_{name}.pt", weights_only=True)
        net.load_state_dict(state["model"])
        if name in trinet.optimizers and "optimizer" in state:
            trinet.optimizers[name].load_state_dict(state["optimizer"])
    return trinet, manifest
