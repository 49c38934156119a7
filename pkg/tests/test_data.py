import numpy as np
import pytest
from PIL import Image

from cascade_seg.data import (
    AugmentConfig,
    DataError,
    DatasetManifest,
    Sample,
    augment,
    load_shenzhen,
    make_manifest,
    normalize,
    scan_ids,
    split,
    synth_shapes,
    write_dataset,
)


def test_synth_deterministic():
    a = synth_shapes(5, 64, seed=3)
    b = synth_shapes(5, 64, seed=3)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert x.image.tobytes() == y.image.tobytes()
        assert x.clean_mask.tobytes() == y.clean_mask.tobytes()
    c = synth_shapes(5, 64, seed=4)
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_synth_count_and_invariants():
    samples = synth_shapes(10, 48, seed=0)
    assert len(samples) == 10
    for s in samples:
        assert s.image.shape == s.clean_mask.shape == s.train_mask.shape == (48, 48)
        assert set(np.unique(s.clean_mask)) <= {0, 1}
        np.testing.assert_array_equal(s.clean_mask, s.train_mask)
        assert abs(float(s.image.mean())) < 1e-4
        assert abs(float(s.image.std()) - 1) < 1e-4


def test_foreground_fraction_over_1000_seeds():
    fracs = [synth_shapes(1, 32, seed=k)[0].clean_mask.mean() for k in range(1000)]
    assert 0.05 <= min(fracs) and max(fracs) <= 0.5


def test_synth_rejects_bad_args():
    with pytest.raises(DataError):
        synth_shapes(0, 64)
    with pytest.raises(DataError):
        synth_shapes(3, 16)


def test_normalize():
    img = np.random.default_rng(0).uniform(0, 255, (30, 40))
    out = normalize(img)
    assert abs(out.mean()) < 1e-4 and abs(out.std() - 1) < 1e-4
    with pytest.raises(DataError):
        normalize(np.full((8, 8), 7.0))


# ----------------------------------------------------------- augmentation


def _sample(seed=0):
    return synth_shapes(1, 64, seed=seed)[0]


def test_augment_identity():
    s = _sample()
    out = augment(s, np.random.default_rng(0), AugmentConfig(max_rotation=0, flip_prob=0))
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.train_mask, s.train_mask)


def test_augment_flip_is_shared():
    s = _sample()
    noisy = s.train_mask.copy()
    noisy[:, :20] = 0
    s = Sample(s.id, s.image, s.clean_mask, noisy)
    out = augment(s, np.random.default_rng(0), AugmentConfig(max_rotation=0, flip_prob=1.0))
    np.testing.assert_array_equal(out.image, s.image[:, ::-1])
    np.testing.assert_array_equal(out.train_mask, s.train_mask[:, ::-1])
    np.testing.assert_array_equal(out.clean_mask, s.clean_mask[:, ::-1])


def test_rotated_masks_stay_binary_and_aligned():
    s = _sample(1)
    rng = np.random.default_rng(7)
    for _ in range(100):
        out = augment(s, rng, AugmentConfig(max_rotation=30, flip_prob=0.5))
        assert set(np.unique(out.train_mask)) <= {0, 1}
        assert set(np.unique(out.clean_mask)) <= {0, 1}
        # clean == train before augmentation, so the shared transform keeps them equal
        np.testing.assert_array_equal(out.train_mask, out.clean_mask)
        assert out.image.dtype == np.float32


def test_augment_does_not_touch_input():
    s = _sample()
    before = s.image.copy()
    augment(s, np.random.default_rng(0))
    np.testing.assert_array_equal(s.image, before)


# ------------------------------------------------------------ manifests


def test_manifest_split_deterministic():
    ids = [f"x{i:03d}" for i in range(566)]
    a = make_manifest(ids, 396, 170, split_seed=5)
    b = make_manifest(reversed(ids), 396, 170, split_seed=5)
    assert a == b
    assert len(a.train_ids) == 396 and len(a.test_ids) == 170
    assert not set(a.train_ids) & set(a.test_ids)
    assert make_manifest(ids, 396, 170, split_seed=6).train_ids != a.train_ids


def test_manifest_rejects_overlap_and_bad_counts():
    with pytest.raises(DataError):
        DatasetManifest(["a", "b"], ["b"])
    with pytest.raises(DataError):
        make_manifest(["a", "b"], 2, 1)


def test_manifest_roundtrip(tmp_path):
    m = make_manifest(range(10), 6, 4, source="synthetic", image_size=64)
    m.save(tmp_path / "m.json")
    assert DatasetManifest.load(tmp_path / "m.json") == m


# ------------------------------------------------------------- disk I/O


def _write_pairs(root, n, size=40):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        img = rng.integers(0, 256, (size, size + 8), dtype=np.uint8)
        mask = np.zeros((size, size + 8), np.uint8)
        mask[5:25, 8:30] = 255
        mask[30:33, 2:4] = 100  # below threshold
        Image.fromarray(img).save(root / "images" / f"id{i}.png")
        Image.fromarray(mask).save(root / "masks" / f"id{i}.png")


def test_load_layout(tmp_path):
    _write_pairs(tmp_path, 7)
    manifest = make_manifest(scan_ids(tmp_path), 5, 2, image_size=32)
    samples = load_shenzhen(tmp_path, manifest)
    assert len(samples) == 7
    train, test = split(samples, manifest)
    assert [s.id for s in train] == manifest.train_ids
    assert [s.id for s in test] == manifest.test_ids
    for s in samples:
        assert s.image.shape == (32, 32)
        assert set(np.unique(s.clean_mask)) == {0, 1}
        assert abs(s.image.mean()) < 1e-4 and abs(s.image.std() - 1) < 1e-4


def test_load_missing_mask_names_the_id(tmp_path):
    _write_pairs(tmp_path, 3)
    (tmp_path / "masks" / "id1.png").unlink()
    with pytest.raises(DataError, match="id1"):
        scan_ids(tmp_path)
    manifest = DatasetManifest(["id0", "id1"], ["id2"], source="shenzhen", image_size=32)
    with pytest.raises(DataError, match="id1"):
        load_shenzhen(tmp_path, manifest)


def test_load_unreadable_and_constant(tmp_path):
    _write_pairs(tmp_path, 2)
    (tmp_path / "images" / "id0.png").write_bytes(b"not a png")
    manifest = DatasetManifest(["id0"], [], source="shenzhen", image_size=32)
    with pytest.raises(DataError, match="unreadable"):
        load_shenzhen(tmp_path, manifest)
    Image.fromarray(np.full((40, 48), 9, np.uint8)).save(tmp_path / "images" / "id1.png")
    with pytest.raises(DataError, match="zero variance"):
        load_shenzhen(tmp_path, DatasetManifest(["id1"], [], source="shenzhen", image_size=32))


def test_write_then_load_roundtrip(tmp_path):
    samples = synth_shapes(4, 64, seed=2)
    m = make_manifest([s.id for s in samples], 3, 1, source="synthetic", image_size=64)
    write_dataset(samples, tmp_path, m)
    loaded = load_shenzhen(tmp_path, DatasetManifest.load(tmp_path / "manifest.json"))
    by_id = {s.id: s for s in samples}
    for s in loaded:
        np.testing.assert_array_equal(s.clean_mask, by_id[s.id].clean_mask)
        assert np.corrcoef(s.image.ravel(), by_id[s.id].image.ravel())[0, 1] > 0.999
