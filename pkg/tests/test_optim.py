import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hstmrf.nn import Parameter
from hstmrf.optim import AdamW, Schedule, lr_at
from hstmrf.tensor import NonFiniteError, default_dtype


@pytest.fixture(autouse=True)
def f64():
    with default_dtype(np.float64):
        yield


def scalar_param(value, grad):
    p = Parameter(np.array([value], dtype=np.float64))
    p.grad = np.array([grad], dtype=np.float64)
    return p


def test_adamw_hand_example():
    p = scalar_param(1.0, 1.0)
    AdamW([p], lr=0.1, weight_decay=0.01).step()
    expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.01 * 1.0
    assert abs(p.data[0] - expected) <= 1e-12
    assert round(p.data[0], 4) == 0.8990


def test_adamw_zero_grad_is_pure_decay():
    p = scalar_param(3.0, 0.0)
    opt = AdamW([p], lr=0.05, weight_decay=0.1)
    for k in range(1, 4):
        opt.step()
        assert p.data[0] == pytest.approx(3.0 * (1 - 0.05 * 0.1) ** k, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-4, 0.5), st.floats(0, 0.1))
def test_two_steps_match_reference(p0, g1, g2, lr, wd):
    # independent scalar reference of the decoupled update
    b1, b2, eps = 0.9, 0.999, 1e-8
    p, m, v = p0, 0.0, 0.0
    for t, g in ((1, g1), (2, g2)):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1 ** t), v / (1 - b2 ** t)
        p = p - lr * mh / (math.sqrt(vh) + eps) - lr * wd * p
    par = scalar_param(p0, g1)
    opt = AdamW([par], lr=lr, weight_decay=wd)
    opt.step()
    par.grad = np.array([g2])
    opt.step()
    assert abs(par.data[0] - p) <= 1e-12


def test_missing_grad_counts_as_zero():
    p = Parameter(np.ones(2))
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    np.testing.assert_array_equal(p.data, 1.0)


def test_nonfinite_gradient_rejected():
    p = scalar_param(1.0, float("nan"))
    with pytest.raises(NonFiniteError):
        AdamW([p]).step()


def test_clip_grad_norm():
    p = Parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    opt = AdamW([p])
    assert opt.clip_grad_norm(1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-5)


# ------------------------------------------------------------- schedule
SCHED = Schedule(warmup_steps=10, total_steps=110, lr_max=1e-4, lr_min=1e-6)


def test_schedule_examples():
    assert lr_at(0, SCHED) == 0.0
    assert lr_at(5, SCHED) == pytest.approx(5e-5)
    assert lr_at(10, SCHED) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at(110, SCHED) == pytest.approx(1e-6, abs=1e-18)
    assert lr_at(60, SCHED) == pytest.approx((1e-4 + 1e-6) / 2, abs=1e-18)


def test_schedule_continuous_and_monotone():
    eps = 1e-9
    w = SCHED.warmup_steps
    assert abs(lr_at(w, SCHED) - SCHED.lr_max * (w - eps) / w) < 1e-12
    lrs = [lr_at(s, SCHED) for s in range(w, SCHED.total_steps + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 50), st.integers(1, 500))
def test_schedule_bounds(warmup, extra):
    s = Schedule(warmup, warmup + extra)
    for step in (0, warmup, warmup + extra // 2, warmup + extra):
        assert 0.0 <= lr_at(step, s) <= s.lr_max
    assert lr_at(warmup + extra, s) == pytest.approx(s.lr_min)


def test_schedule_errors():
    with pytest.raises(ValueError, match="outside"):
        lr_at(111, SCHED)
    with pytest.raises(ValueError, match="outside"):
        lr_at(-1, SCHED)
    with pytest.raises(ValueError):
        Schedule(10, 10)
