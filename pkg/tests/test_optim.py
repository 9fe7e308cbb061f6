import numpy as np
import pytest

from maebench.errors import ConfigError, ShapeError
from maebench.optim import AdamW
from maebench.rng import seeded_rng, truncated_normal
from maebench.tensor import Tensor


def _param(value, dtype=np.float64):
    return Tensor(np.array(value, dtype=dtype), requires_grad=True)


def test_single_step_matches_reference_update():
    # p=1, g=0.5, lr=0.1, betas (0.9, 0.999), wd=0.01, eps=1e-8, worked by hand:
    # decay 1 -> 0.999; m_hat = 0.5, v_hat = 0.25; step = 0.1 * 0.5 / (0.5 + 1e-8)
    p = _param([1.0])
    opt = AdamW({"p": p}, lr=0.1, betas=(0.9, 0.999), weight_decay=0.01, eps=1e-8)
    p.grad = np.array([0.5])
    opt.step()
    assert p.data[0] == pytest.approx(0.899000002, abs=1e-12)


def test_two_steps_match_reference_loop():
    grads = [np.array([0.3, -1.2]), np.array([-0.7, 0.4])]
    lr, b1, b2, wd, eps = 0.05, 0.8, 0.9, 0.1, 1e-6
    ref = np.array([0.5, -2.0])
    m = np.zeros(2)
    v = np.zeros(2)
    for t, g in enumerate(grads, start=1):
        ref = ref * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    p = _param([0.5, -2.0])
    opt = AdamW({"p": p}, lr=lr, betas=(b1, b2), weight_decay=wd, eps=eps)
    for g in grads:
        p.grad = g
        opt.step()
    np.testing.assert_allclose(p.data, ref, rtol=1e-13)


def test_lr_zero_leaves_params_unchanged():
    p = _param([1.5, -3.0])
    opt = AdamW({"p": p}, lr=0.0)
    p.grad = np.array([10.0, -4.0])
    opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -3.0])


def test_zero_grad_with_decay_shrinks_by_lr_wd():
    p = _param([2.0, -4.0])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * 0.95, -4.0 * 0.95], rtol=1e-15)


def test_no_decay_names_are_exempt():
    w = _param([2.0])
    b = _param([2.0])
    opt = AdamW({"w": w, "b": b}, lr=0.1, weight_decay=0.5, no_decay=["b"])
    w.grad = np.zeros(1)
    b.grad = np.zeros(1)
    opt.step()
    assert w.data[0] < 2.0 and b.data[0] == 2.0


def test_state_shapes_and_step_counter():
    params = {"a": _param(np.ones((2, 3))), "b": _param(np.ones(4))}
    opt = AdamW(params, lr=0.01)
    for k in range(1, 4):
        for p in params.values():
            p.grad = np.ones_like(p.data)
        opt.step()
        assert opt.state.step == k
    for name, p in params.items():
        assert opt.state.exp_avg[name].shape == p.shape
        assert opt.state.exp_avg_sq[name].shape == p.shape


def test_grad_shape_mismatch():
    p = _param([1.0, 2.0])
    opt = AdamW({"p": p})
    p.grad = np.ones(3)
    with pytest.raises(ShapeError):
        opt.step()


def test_negative_lr_rejected():
    with pytest.raises(ConfigError):
        AdamW({"p": _param([1.0])}, lr=-1.0)


def test_state_arrays_round_trip():
    p = _param([1.0, 2.0])
    opt = AdamW({"p": p}, lr=0.1)
    p.grad = np.array([0.1, 0.2])
    opt.step()
    other = AdamW({"p": _param([1.0, 2.0])}, lr=0.1)
    other.load_state_arrays(opt.state_arrays(), opt.state.step)
    np.testing.assert_array_equal(other.state.exp_avg["p"], opt.state.exp_avg["p"])
    assert other.state.step == 1


# -- rng -------------------------------------------------------------------------
def test_same_seed_same_stream():
    a = seeded_rng(7).random(100)
    b = seeded_rng(7).random(100)
    assert np.array_equal(a, b)
    assert not np.array_equal(seeded_rng(7, 1).random(100), seeded_rng(7, 2).random(100))


def test_permutation_is_bijection():
    p = seeded_rng(3).permutation(1000)
    np.testing.assert_array_equal(np.sort(p), np.arange(1000))


def test_normal_mean_law_of_large_numbers():
    assert abs(seeded_rng(11).standard_normal(100_000).mean()) < 0.02


def test_truncated_normal_bounds():
    x = truncated_normal(seeded_rng(0), (10_000,), std=0.02, dtype=np.float64)
    assert np.abs(x).max() <= 0.04
    assert 0.015 < x.std() < 0.02  # truncation at 2 sigma shrinks the spread to ~0.88 sigma
