import numpy as np
import pytest

from minitod.optim import AdamW, NumericsError


def test_zero_gradient_is_a_noop():
    opt = AdamW(4, lr_max=0.1, total_steps=10, weight_decay=0.0)
    params = np.array([1.0, -2.0, 0.5, 3.0])
    before = params.copy()
    opt.update(params, np.zeros(4))
    np.testing.assert_array_equal(params, before)


def test_linear_warmup_value():
    opt = AdamW(1, lr_max=1.0, total_steps=100, warmup_frac=0.2)
    assert opt.lr(10) == pytest.approx(0.5)
    assert opt.lr(20) == pytest.approx(1.0)
    assert opt.lr(60) == pytest.approx(0.5)
    assert opt.lr(100) == pytest.approx(0.0)


def test_quadratic_bowl_converges():
    target = 3.7
    params = np.array([0.0])
    opt = AdamW(1, lr_max=0.1, total_steps=10_000, warmup_frac=0.0)
    for _ in range(500):
        grad = params - target  # gradient of 0.5 (x - target)^2
        opt.update(params, grad)
    assert abs(params[0] - target) < 1e-6


def test_nan_gradient_aborts():
    opt = AdamW(2, lr_max=0.1, total_steps=10)
    with pytest.raises(NumericsError):
        opt.update(np.zeros(2), np.array([1.0, float("nan")]))


def test_weight_decay_is_decoupled():
    opt = AdamW(1, lr_max=0.5, total_steps=10, warmup_frac=0.0, weight_decay=0.1)
    params = np.array([2.0])
    lr1 = opt.lr(1)
    opt.update(params, np.zeros(1))
    # zero gradient: only the decay term moves the parameter
    assert params[0] == pytest.approx(2.0 - lr1 * 0.1 * 2.0)


def test_state_round_trip(tmp_path):
    opt = AdamW(3, lr_max=0.2, total_steps=50, warmup_frac=0.1, weight_decay=0.01)
    params = np.array([1.0, 2.0, 3.0])
    rng = np.random.Generator(np.random.PCG64(0))
    for _ in range(5):
        opt.update(params, rng.normal(size=3))
    path = tmp_path / "opt.ckpt"
    opt.save(path)
    back = AdamW.load(path)
    assert back.step_count == opt.step_count
    np.testing.assert_array_equal(back.m, opt.m)
    np.testing.assert_array_equal(back.v, opt.v)
    p1, p2 = params.copy(), params.copy()
    g = rng.normal(size=3)
    opt.update(p1, g.copy())
    back.update(p2, g.copy())
    np.testing.assert_array_equal(p1, p2)
