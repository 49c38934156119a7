"""Datasets: Shenzhen chest X-ray loader, synthetic two-blob surrogate,
per-image normalization and paired augmentation."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

SHENZHEN_TRAIN = 396
SHENZHEN_TEST = 170


class DataError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float32, H x W, zero mean / unit variance
    clean_mask: np.ndarray  # uint8 {0,1}; only used for evaluation
    train_mask: np.ndarray  # uint8 {0,1}; possibly corrupted

    def __post_init__(self):
        shapes = {self.image.shape, self.clean_mask.shape, self.train_mask.shape}
        if len(shapes) != 1:
            raise DataError(f"sample {self.id}: grid shapes differ {shapes}")

    @property
    def shape(self):
        return self.image.shape


@dataclass
class DatasetManifest:
    train_ids: list[str]
    test_ids: list[str]
    source: str = "synthetic"
    image_size: int = 256
    split_seed: int = 0

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise DataError(f"train/test overlap: {sorted(overlap)[:5]}")
        if self.source not in ("shenzhen", "synthetic"):
            raise DataError(f"unknown source {self.source!r}")

    @property
    def ids(self) -> list[str]:
        return list(self.train_ids) + list(self.test_ids)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls(**json.loads(Path(path).read_text()))


def make_manifest(
    ids, n_train: int, n_test: int | None = None, *, source="shenzhen",
    image_size=256, split_seed=0,
) -> DatasetManifest:
    """Deterministic shuffled split of ``ids`` into train and test."""
    ids = sorted(str(i) for i in ids)
    if n_test is None:
        n_test = len(ids) - n_train
    if n_train < 0 or n_test < 0 or n_train + n_test > len(ids):
        raise DataError(f"cannot split {len(ids)} ids into {n_train}/{n_test}")
    order = np.random.default_rng(split_seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetManifest(
        train_ids=shuffled[:n_train],
        test_ids=shuffled[n_train:n_train + n_test],
        source=source,
        image_size=image_size,
        split_seed=split_seed,
    )


def normalize(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    std = image.std()
    if not np.isfinite(std) or std < 1e-8:
        raise DataError("cannot normalize an image with zero variance")
    return ((image - image.mean()) / std).astype(np.float32)


def _read_gray(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("L")
    except (OSError, ValueError) as e:
        raise DataError(f"unreadable file {path}: {e}") from e


def load_sample(root, sample_id: str, size: int) -> Sample:
    root = Path(root)
    img_path = root / "images" / f"{sample_id}.png"
    mask_path = root / "masks" / f"{sample_id}.png"
    if not img_path.exists():
        raise DataError(f"missing image for id {sample_id}")
    if not mask_path.exists():
        raise DataError(f"missing mask for id {sample_id}")
    img = _read_gray(img_path).resize((size, size), Image.BILINEAR)
    mask = _read_gray(mask_path).resize((size, size), Image.NEAREST)
    try:
        image = normalize(np.asarray(img))
    except DataError as e:
        raise DataError(f"id {sample_id}: {e}") from None
    mask = (np.asarray(mask) >= 128).astype(np.uint8)
    return Sample(sample_id, image, mask, mask.copy())


def load_shenzhen(root_dir, manifest: DatasetManifest) -> list[Sample]:
    """Load every id of the manifest (train ids first, then test ids).

    Expects ``images/<id>.png`` and ``masks/<id>.png`` under ``root_dir``.
    """
    return [load_sample(root_dir, i, manifest.image_size) for i in manifest.ids]


def scan_ids(root_dir) -> list[str]:
    root = Path(root_dir)
    image_ids = {p.stem for p in (root / "images").glob("*.png")}
    mask_ids = {p.stem for p in (root / "masks").glob("*.png")}
    missing = sorted(image_ids - mask_ids)
    if missing:
        raise DataError(f"missing mask for id {missing[0]}" + (
            f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    return sorted(image_ids)


def split(samples: list[Sample], manifest: DatasetManifest):
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in manifest.train_ids], [by_id[i] for i in manifest.test_ids]


# ---------------------------------------------------------------- synthetic


def _ellipse(h, w, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _wobble(mask: np.ndarray, rng, strength: float) -> np.ndarray:
    # irregular boundary: threshold a smoothed random field added to the signed distance
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    sdf = inside - outside
    field_ = ndimage.gaussian_filter(rng.standard_normal(mask.shape), mask.shape[0] / 10)
    field_ /= np.abs(field_).max() + 1e-12
    return sdf + strength * field_ > 0


def synth_sample(size: int, rng, sample_id: str = "0", contrast: float = 0.6,
                 noise: float = 0.5, ribs: float = 0.3, heart: float = 0.45) -> Sample:
    """One surrogate radiograph: two dark elliptical "lungs" on a bright,
    textured, vignetted background.

    Rib bands and a central "heart" shadow overlap the lungs without being
    part of the mask, so the network has to learn shape as well as darkness.
    """
    h = w = size
    for _ in range(100):
        ry = size * rng.uniform(0.26, 0.36)
        rx = size * rng.uniform(0.13, 0.18)
        gap = size * rng.uniform(0.20, 0.24)
        cy = size * rng.uniform(0.45, 0.55)
        cx = size * 0.5 + size * rng.uniform(-0.04, 0.04)
        tilt = rng.uniform(-0.25, 0.25)
        left = _ellipse(h, w, cy + size * rng.uniform(-0.03, 0.03), cx - gap, ry,
                        rx, tilt + rng.uniform(-0.1, 0.1))
        right = _ellipse(h, w, cy + size * rng.uniform(-0.03, 0.03), cx + gap,
                         ry * rng.uniform(0.85, 1.05), rx, -tilt + rng.uniform(-0.1, 0.1))
        mask = _wobble(left | right, rng, strength=size * 0.03)
        frac = mask.mean()
        if 0.05 <= frac <= 0.5:
            break
    else:  # pragma: no cover - parameter ranges keep frac inside the band
        raise RuntimeError("could not draw a mask with foreground fraction in [0.05, 0.5]")

    yy, xx = np.mgrid[0:h, 0:w] / size
    background = 1.0 - 0.6 * ((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
    background += 0.15 * rng.standard_normal() * (xx - 0.5)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma=size / 40)
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=size / 32)
    texture /= texture.std() + 1e-12
    period = rng.uniform(0.09, 0.14)
    rib = np.sin(2 * np.pi * (yy + 0.15 * rng.standard_normal() * (xx - 0.5) ** 2) / period
                 + rng.uniform(0, 2 * np.pi))
    blob = _ellipse(h, w, cy + size * rng.uniform(0.05, 0.15), cx + size * rng.uniform(-0.05, 0.05),
                    size * rng.uniform(0.12, 0.2), size * rng.uniform(0.1, 0.16),
                    rng.uniform(-0.5, 0.5))
    blob = ndimage.gaussian_filter(blob.astype(np.float64), sigma=size / 20)
    image = background - contrast * soft + 0.25 * texture + ribs * rib - heart * blob
    image += noise * rng.standard_normal((h, w))
    mask = mask.astype(np.uint8)
    return Sample(sample_id, normalize(image), mask, mask.copy())


def sample_rng(seed: int, key) -> np.random.Generator:
    """Independent stream for one sample, derived from (seed, key)."""
    if isinstance(key, str):
        key = zlib.crc32(key.encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(key)]))


def synth_shapes(count: int, size: int = 64, seed: int = 0, **kwargs) -> list[Sample]:
    if count < 1:
        raise DataError("count must be >= 1")
    if size < 32:
        raise DataError("size must be >= 32")
    return [
        synth_sample(size, sample_rng(seed, i), sample_id=f"syn{i:05d}", **kwargs)
        for i in range(count)
    ]


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation: float = 10.0  # degrees, uniform in [-max, +max]
    flip_prob: float = 0.5


def _rotate(grid, angle, order, cval):
    return ndimage.rotate(grid, angle, reshape=False, order=order, mode="constant",
                          cval=cval, prefilter=False)


def augment(sample: Sample, rng, config: AugmentConfig = AugmentConfig()) -> Sample:
    """Apply one random rotation + horizontal flip to every grid of a sample."""
    angle = rng.uniform(-config.max_rotation, config.max_rotation) if config.max_rotation else 0.0
    flip = bool(rng.random() < config.flip_prob) if config.flip_prob else False
    image, clean, train = sample.image, sample.clean_mask, sample.train_mask
    if angle != 0.0:
        image = _rotate(image, angle, 1, float(image.min())).astype(np.float32)
        clean = _rotate(clean, angle, 0, 0)
        train = _rotate(train, angle, 0, 0)
    if flip:
        image, clean, train = image[:, ::-1], clean[:, ::-1], train[:, ::-1]
    return replace(
        sample,
        image=np.ascontiguousarray(image),
        clean_mask=np.ascontiguousarray(clean),
        train_mask=np.ascontiguousarray(train),
    )


# ------------------------------------------------------------- disk layout


def save_png(array, path) -> None:
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG", optimize=False)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    return np.round((image - lo) / max(hi - lo, 1e-12) * 255).astype(np.uint8)


def write_dataset(samples, root, manifest: DatasetManifest | None = None) -> None:
    """Write samples in the ``images/<id>.png`` / ``masks/<id>.png`` layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_png(image_to_uint8(s.image), root / "images" / f"{s.id}.png")
        save_png(s.clean_mask * 255, root / "masks" / f"{s.id}.png")
    if manifest is not None:
        manifest.save(root / "manifest.json")
