import numpy as np
import pytest
import torch

from cascade_seg.model import (
    DESK,
    ConfigError,
    ModelConfig,
    build_trinet,
    build_unet,
    ensemble_predict,
    load_checkpoint,
    parameter_distance,
    predict_proba,
    save_checkpoint,
)

TINY = ModelConfig(depth=3, base_channels=4)


def test_desk_shape():
    net = build_unet(DESK, seed=0)
    assert net(torch.zeros(2, 1, 64, 64)).shape == (2, 2, 64, 64)


def test_depth4_full_resolution_shape():
    net = build_unet(ModelConfig(depth=4, base_channels=2), seed=0)
    assert net(torch.zeros(1, 1, 256, 256)).shape == (1, 2, 256, 256)


def test_batch_32_at_256():
    net = build_unet(ModelConfig(depth=4, base_channels=2, input_size=256), seed=0)
    probs = predict_proba(net, np.zeros((32, 256, 256), np.float32))
    assert probs.shape == (32, 256, 256, 2)


def test_indivisible_input_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(depth=4, input_size=100)
    net = build_unet(ModelConfig(depth=4, base_channels=2), seed=0)
    with pytest.raises(ConfigError, match="divisible"):
        net(torch.zeros(1, 1, 100, 100))


@pytest.mark.parametrize("norm", ["batch", "none"])
def test_predict_proba_simplex(norm):
    net = build_unet(ModelConfig(depth=2, base_channels=4, norm=norm), seed=1)
    x = np.random.default_rng(0).normal(size=(3, 32, 32)).astype(np.float32) * 5
    p = predict_proba(net, x)
    assert ((p >= 0) & (p <= 1)).all()
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-6)


def test_predict_proba_shape_errors():
    net = build_unet(TINY, seed=0)
    with pytest.raises(ValueError):
        predict_proba(net, np.zeros((1, 2, 32, 32), np.float32))
    with pytest.raises(ValueError):
        predict_proba(net, np.zeros((32, 32), np.float32))


def test_identical_networks_identical_outputs():
    a, b = build_unet(TINY, seed=5), build_unet(TINY, seed=5)
    x = np.random.default_rng(1).normal(size=(2, 32, 32)).astype(np.float32)
    pa, pb = predict_proba(a, x), predict_proba(b, x)
    assert pa.tobytes() == pb.tobytes()
    assert predict_proba(a, x).tobytes() == pa.tobytes()


def test_predict_proba_restores_train_mode():
    net = build_unet(TINY, seed=0)
    net.train()
    predict_proba(net, np.zeros((1, 32, 32), np.float32))
    assert net.training


def test_trinet_distinct_init():
    tri = build_trinet(TINY, [1, 2, 3])
    names = tri.names
    assert names == ("A", "B", "C")
    for i in range(3):
        for j in range(i + 1, 3):
            assert parameter_distance(tri[names[i]], tri[names[j]]) > 0
    with pytest.raises(ConfigError):
        build_trinet(TINY, [1, 1, 2])


def test_build_unet_does_not_disturb_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    build_unet(TINY, seed=9)
    assert torch.rand(1) == expected


def test_ensemble_mean():
    tri = build_trinet(TINY, [1, 2, 3])
    x = np.random.default_rng(2).normal(size=(2, 32, 32)).astype(np.float32)
    expected = np.mean([predict_proba(n, x) for n in tri.nets.values()], axis=0)
    out = ensemble_predict(tri, x)
    np.testing.assert_allclose(out, expected, atol=1e-7)
    np.testing.assert_allclose(out.sum(-1), 1, atol=1e-6)


class _Const(torch.nn.Module):
    def __init__(self, p):
        super().__init__()
        self.p = torch.tensor(p)

    def forward(self, x):
        n, _, h, w = x.shape
        return torch.log(self.p).view(1, -1, 1, 1).expand(n, -1, h, w)


def test_ensemble_worked_pixel():
    from cascade_seg.model import TriNet

    tri = TriNet({"A": _Const([0.2, 0.8]), "B": _Const([0.4, 0.6]), "C": _Const([0.6, 0.4])},
                 {}, TINY, {})
    out = ensemble_predict(tri, np.zeros((1, 2, 2), np.float32))
    np.testing.assert_allclose(out[0, 0, 0], [0.4, 0.6], atol=1e-6)
    same = TriNet({m: _Const([0.3, 0.7]) for m in "ABC"}, {}, TINY, {})
    np.testing.assert_allclose(ensemble_predict(same, np.zeros((1, 2, 2)))[0, 1, 1], [0.3, 0.7],
                               atol=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    factory = lambda p: torch.optim.SGD(p, lr=0.1, momentum=0.9)
    tri = build_trinet(TINY, [4, 5, 6], optimizer_factory=factory)
    x = np.random.default_rng(0).normal(size=(1, 32, 32)).astype(np.float32)
    save_checkpoint(tri, tmp_path / "ck", epoch=3)
    back, manifest = load_checkpoint(tmp_path / "ck", factory)
    assert manifest["epoch"] == 3 and manifest["seeds"] == {"A": 4, "B": 5, "C": 6}
    for m in "ABC":
        assert predict_proba(back[m], x).tobytes() == predict_proba(tri[m], x).tobytes()
