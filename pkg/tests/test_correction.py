import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cascade_seg.correction import (
    EPS,
    CorrectionConfig,
    average_peer_prediction,
    corrected_label,
    joint_loss,
    one_hot,
    sharpen,
    soft_cross_entropy,
)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return -(p[nz] * np.log(p[nz])).sum()


def random_simplex(rng, n, classes):
    return rng.dirichlet(np.ones(classes) * 0.7, size=n)


# ------------------------------------------------------------- averaging


def test_average_of_equals():
    q = random_simplex(np.random.default_rng(0), 12, 2).reshape(3, 4, 2)
    np.testing.assert_allclose(average_peer_prediction(q, q), q, atol=0)


def test_average_pixel():
    out = average_peer_prediction(np.array([[[0.2, 0.8]]]), np.array([[[0.6, 0.4]]]))
    np.testing.assert_allclose(out, [[[0.4, 0.6]]], atol=1e-12)


def test_average_simplex_and_shape_check():
    rng = np.random.default_rng(1)
    a, b = random_simplex(rng, 50, 3), random_simplex(rng, 50, 3)
    out = average_peer_prediction(a, b)
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1), 1, atol=1e-12)
    with pytest.raises(ValueError):
        average_peer_prediction(a, b[:10])


# ------------------------------------------------------------- sharpening


def test_sharpen_identity_at_t1():
    q = random_simplex(np.random.default_rng(2), 1000, 2)
    np.testing.assert_allclose(sharpen(q, 1.0), q, atol=1e-9, rtol=0)


def test_sharpen_worked_pixel():
    # (0.6^2, 0.4^2) / (0.36 + 0.16)
    out = sharpen(np.array([0.6, 0.4]), 0.5)
    np.testing.assert_allclose(out, [0.36 / 0.52, 0.16 / 0.52], atol=1e-12)
    np.testing.assert_allclose(out, [0.69231, 0.30769], atol=1e-5)


@pytest.mark.parametrize("t", [0.05, 0.5, 1.0, 3.0])
def test_sharpen_uniform_fixed_point(t):
    np.testing.assert_allclose(sharpen(np.array([0.5, 0.5]), t), [0.5, 0.5], atol=1e-12)


def test_sharpen_small_t_goes_one_hot():
    q = np.array([0.3, 0.45, 0.25])
    np.testing.assert_allclose(sharpen(q, 1e-3), [0, 1, 0], atol=1e-12)
    assert np.isfinite(sharpen(np.array([1e-300, 1.0]), 1e-4)).all()


def test_sharpen_keeps_zero_classes_zero():
    out = sharpen(np.array([0.0, 0.7, 0.3]), 0.5)
    assert out[0] == 0
    with pytest.raises(ValueError):
        sharpen(np.zeros(2), 0.5)
    with pytest.raises(ValueError):
        sharpen(np.array([0.5, 0.5]), 0.0)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.floats(0.05, 0.99))
def test_sharpen_properties(seed, classes, t):
    q = random_simplex(np.random.default_rng(seed), 1, classes)[0]
    out = sharpen(q, t)
    assert (out >= 0).all()
    assert out.sum() == pytest.approx(1, abs=1e-9)
    # ordering preserved (ties stay ties), argmax kept for strict maxima
    assert (np.argsort(q, kind="stable") == np.argsort(out, kind="stable")).all() or \
        np.allclose(np.sort(q), np.sort(q)[::-1])
    if (q == q.max()).sum() == 1:
        assert out.argmax() == q.argmax()
    assert entropy(out) <= entropy(q) + 1e-12


def test_entropy_non_increase_1000_vectors():
    rng = np.random.default_rng(3)
    for classes in (2, 3):
        q = random_simplex(rng, 1000, classes)
        out = sharpen(q, 0.5)
        h_in = np.array([entropy(v) for v in q])
        h_out = np.array([entropy(v) for v in out])
        assert (h_out <= h_in + 1e-12).all()


def test_entropy_equality_only_at_uniform_or_one_hot():
    for q in ([0.5, 0.5], [1.0, 0.0]):
        assert entropy(sharpen(np.array(q), 0.5)) == pytest.approx(entropy(q), abs=1e-12)
    assert entropy(sharpen(np.array([0.7, 0.3]), 0.5)) < entropy([0.7, 0.3]) - 1e-3


def test_sharpen_torch_channel_axis():
    q = torch.tensor([[0.6, 0.5], [0.4, 0.5]], dtype=torch.float32).reshape(1, 2, 1, 2)
    out = sharpen(q, 0.5, dim=1)
    assert torch.is_tensor(out)
    torch.testing.assert_close(out[0, :, 0, 0], torch.tensor([0.36 / 0.52, 0.16 / 0.52]))
    torch.testing.assert_close(out[0, :, 0, 1], torch.tensor([0.5, 0.5]))


# -------------------------------------------------------- corrected label


def brute_corrected(p_b, p_c, t):
    h, w, l = p_b.shape
    out = np.zeros_like(p_b)
    for y in range(h):
        for x in range(w):
            q = [(p_b[y, x, j] + p_c[y, x, j]) / 2 for j in range(l)]
            z = sum(v ** (1 / t) for v in q)
            out[y, x] = [v ** (1 / t) / z for v in q]
    return out


def test_corrected_label_matches_per_pixel_oracle():
    p_b = np.array([[[0.9, 0.1], [0.3, 0.7]], [[0.5, 0.5], [0.2, 0.8]]])
    p_c = np.array([[[0.7, 0.3], [0.6, 0.4]], [[0.1, 0.9], [0.2, 0.8]]])
    np.testing.assert_allclose(corrected_label([p_b, p_c], 0.5), brute_corrected(p_b, p_c, 0.5),
                               atol=1e-12)


def test_corrected_label_near_one_hot_and_uniform():
    mask = np.random.default_rng(4).integers(0, 2, (6, 6))
    oh = np.clip(np.eye(2)[mask], EPS, 1 - EPS)
    np.testing.assert_allclose(corrected_label([oh, oh], 0.5), oh, atol=1e-6)
    uni = np.full((3, 3, 2), 0.5)
    np.testing.assert_allclose(corrected_label([uni, uni], 0.5), uni, atol=1e-12)


def test_three_peer_average():
    rng = np.random.default_rng(5)
    ps = [random_simplex(rng, 4, 2) for _ in range(3)]
    np.testing.assert_allclose(corrected_label(ps, 1.0), np.mean(ps, axis=0), atol=1e-12)


# ------------------------------------------------------------- joint loss


def _maps(seed, shape=(5, 5)):
    rng = np.random.default_rng(seed)
    pred = rng.dirichlet([1, 1], size=shape)
    noisy = rng.integers(0, 2, shape)
    corr = rng.dirichlet([1, 1], size=shape)
    return pred, noisy, corr


def test_joint_loss_convex_combination():
    pred, noisy, corr = _maps(0)
    a = soft_cross_entropy(pred, one_hot(noisy))
    b = soft_cross_entropy(pred, corr)
    assert joint_loss(pred, noisy, corr, 0.5) == pytest.approx((a + b) / 2, abs=1e-12)


def test_joint_loss_half_of_08_and_04():
    # CE(noisy) = -ln p1, CE(corrected) = -ln p2 with p chosen for 0.8 / 0.4
    pred = np.full((2, 2, 2), 0.5)
    pred[..., 1] = np.exp(-0.8)
    pred[..., 0] = 1 - np.exp(-0.8)
    corr = np.zeros_like(pred)
    w = (0.4 - (-np.log(pred[0, 0, 0]))) / (-np.log(pred[0, 0, 1]) + np.log(pred[0, 0, 0]))
    corr[..., 1], corr[..., 0] = w, 1 - w
    noisy = np.ones((2, 2), int)
    assert soft_cross_entropy(pred, corr) == pytest.approx(0.4, abs=1e-9)
    assert joint_loss(pred, noisy, corr, 0.5) == pytest.approx(0.6, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_joint_loss_endpoints_and_linearity(seed):
    pred, noisy, corr = _maps(seed)
    ce_noisy = soft_cross_entropy(pred, one_hot(noisy))
    ce_corr = soft_cross_entropy(pred, corr)
    assert abs(joint_loss(pred, noisy, corr, 1.0) - ce_noisy) <= 1e-9
    assert abs(joint_loss(pred, noisy, corr, 0.0) - ce_corr) <= 1e-9
    l0, l1 = joint_loss(pred, noisy, corr, 0.0), joint_loss(pred, noisy, corr, 1.0)
    for a in np.linspace(0, 1, 11):
        assert abs(joint_loss(pred, noisy, corr, a) - ((1 - a) * l0 + a * l1)) <= 1e-9


def test_joint_loss_identity_when_targets_agree():
    pred, noisy, _ = _maps(7)
    corr = one_hot(noisy)
    plain = soft_cross_entropy(pred, corr)
    assert joint_loss(pred, noisy, corr, 0.5) == pytest.approx(plain, abs=1e-12)


def test_joint_loss_batched_torch_matches_numpy():
    pred, noisy, corr = _maps(8, shape=(2, 4, 4))
    t = lambda a: torch.as_tensor(a).movedim(-1, 1)
    out = joint_loss(t(pred), torch.as_tensor(noisy), t(corr), 0.3, dim=1)
    assert out.shape == (2,)
    for i in range(2):
        assert float(out[i]) == pytest.approx(joint_loss(pred[i], noisy[i], corr[i], 0.3), abs=1e-9)


def test_joint_loss_validation():
    pred, noisy, corr = _maps(0)
    with pytest.raises(ValueError):
        joint_loss(pred, noisy, corr, 1.5)
    with pytest.raises(ValueError):
        joint_loss(pred, noisy, corr[:2], 0.5)


@pytest.mark.parametrize("kw", [dict(temperature=0), dict(alpha=-0.1), dict(alpha=1.5),
                                dict(jo_scope="some"), dict(jo_start_epoch=-1), dict(peer_count=1)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        CorrectionConfig(**kw)
