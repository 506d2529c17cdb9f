import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hstmrf import losses as L
from hstmrf import tensor as T
from hstmrf.config import LossWeights
from hstmrf.gradcheck import check_function
from hstmrf.tensor import Tensor, default_dtype


@pytest.fixture(autouse=True)
def f64():
    with default_dtype(np.float64):
        yield


def rt(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def img(a):
    """Lift a 2-D array to (1, 1, H, W)."""
    return np.asarray(a, dtype=np.float64)[None, None]


# 4x4 toy masks: |GT ∩ SR| = 2, |SR - GT| = 2, |GT - SR| = 2
GT = img([[1, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]])
SR = img([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]])


def counts(s, g):
    return int((s * g).sum()), int((s * (1 - g)).sum()), int(((1 - s) * g).sum())


def test_toy_counts():
    assert counts(SR, GT) == (2, 2, 2)


# -------------------------------------------------------------- tversky
def test_tversky_examples():
    assert L.tversky_from_probs(rt(GT), GT).item() == pytest.approx(0.0, abs=1e-6)
    disjoint = img(np.roll(GT[0, 0], 2, axis=0))
    assert counts(disjoint, GT) == (0, 4, 4)
    assert L.tversky_from_probs(rt(disjoint), GT).item() == pytest.approx(1.0, abs=1e-6)
    assert L.tversky_from_probs(rt(SR), GT).item() == pytest.approx(1 - 2 / (2 + 1.4 + 0.6), abs=1e-6)
    assert L.tversky_from_probs(rt(SR), GT).item() == pytest.approx(0.5, abs=1e-6)


def test_tversky_weights_are_asymmetric():
    # eta weighs false positives: over-segmentation costs more than under-segmentation
    over = img([[1, 1, 1, 1], [1, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]])
    under = img([[1, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]])
    assert L.tversky_from_probs(rt(over), GT).item() > L.tversky_from_probs(rt(under), GT).item()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 1, 4, 4), elements=st.floats(0, 1)),
       arrays(np.bool_, (2, 1, 4, 4)))
def test_symmetric_tversky_is_soft_dice(probs, gt):
    gt = gt.astype(np.float64)
    tv = L.tversky_from_probs(rt(probs), gt, eta=0.5, gamma=0.5).item()
    dice = L.soft_dice_from_probs(rt(probs), gt).item()
    assert abs(tv - dice) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 1, 4, 4), elements=st.floats(0, 1)),
       arrays(np.bool_, (1, 1, 4, 4)))
def test_tversky_in_unit_interval(probs, gt):
    v = L.tversky_from_probs(rt(probs), gt.astype(np.float64)).item()
    assert -1e-9 <= v <= 1 + 1e-9


def test_tversky_gradcheck_on_soft_masks():
    rng = np.random.default_rng(0)
    probs = rng.uniform(0.05, 0.95, size=(1, 1, 4, 4))
    rep = check_function(lambda p: L.tversky_from_probs(p, GT), [probs], step=1e-4)
    assert rep.max_rel_error < 1e-4, rep


# ------------------------------------------------------ boundary weights
def box_mean_oracle(x, k):
    h, w = x.shape
    r = k // 2
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            out[i, j] = x[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1].mean()
    return out


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(-5, 5)),
       st.sampled_from([1, 3, 5, 7]))
def test_box_mean_matches_loops(x, k):
    npt.assert_allclose(L.box_mean(x, k), box_mean_oracle(x, k), atol=1e-9)


def test_uniform_mask_has_unit_weights():
    npt.assert_array_equal(L.boundary_weights(np.ones((1, 1, 8, 8))), 1.0)
    npt.assert_array_equal(L.boundary_weights(np.zeros((1, 1, 8, 8))), 1.0)


def test_weights_peak_at_boundary():
    g = np.zeros((1, 1, 16, 16))
    g[..., 4:12, 4:12] = 1
    w = L.boundary_weights(g)
    assert w[0, 0, 4, 8] > w[0, 0, 8, 8]
    assert w[0, 0, 3, 8] > w[0, 0, 0, 0]
    assert w.min() >= 1.0


# ------------------------------------------------------------------ BCE
def test_bce_unit_weights_is_plain_mean():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(2, 1, 6, 6))
    g = np.ones((2, 1, 6, 6))
    plain = np.mean(np.log1p(np.exp(-z)))
    assert L.weighted_bce(rt(z), g).item() == pytest.approx(plain, rel=1e-12)


def test_bce_zero_logits_is_ln2():
    g = (np.random.default_rng(2).random((1, 1, 8, 8)) > 0.5).astype(float)
    assert L.weighted_bce(rt(np.zeros_like(g)), g).item() == pytest.approx(math.log(2), rel=1e-12)


def test_bce_saturated_prediction():
    assert L.weighted_bce(rt(np.where(SR > 0, 20.0, -20.0)), SR).item() < 1e-8


def test_bce_stable_for_huge_logits():
    v = L.weighted_bce(rt(np.full((1, 1, 2, 2), -1e4)), np.ones((1, 1, 2, 2))).item()
    assert v == pytest.approx(1e4)


# ------------------------------------------------------------------ IoU
def test_weighted_iou_examples():
    ones = np.ones_like(GT)
    assert L.weighted_iou_from_probs(rt(GT), GT, ones).item() == pytest.approx(0.0, abs=1e-9)
    assert L.weighted_iou_from_probs(rt(1 - GT), GT).item() == pytest.approx(1.0, abs=1e-6)
    assert L.weighted_iou_from_probs(rt(SR), GT, ones).item() == pytest.approx(1 - 2 / 6, abs=1e-6)
    assert round(L.weighted_iou_from_probs(rt(SR), GT, ones).item(), 4) == 0.6667


def test_batch_losses_are_per_image_means():
    g = np.concatenate([GT, 1 - GT])
    s = np.concatenate([SR, SR])
    both = L.tversky_from_probs(rt(s), g).item()
    each = [L.tversky_from_probs(rt(s[i:i + 1]), g[i:i + 1]).item() for i in range(2)]
    assert both == pytest.approx(np.mean(each), rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(T.ShapeError, match="differ"):
        L.tversky_loss(rt(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)))


# ---------------------------------------------------------- composition
def test_stage_loss_decomposes():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(2, 1, 8, 8))
    g = (rng.random((2, 1, 8, 8)) > 0.6).astype(float)
    w = L.boundary_weights(g)
    parts = (L.weighted_iou(rt(z), g, w).item() + L.weighted_bce(rt(z), g, w).item()
             + L.tversky_loss(rt(z), g).item())
    assert L.stage_loss(rt(z), g).item() == pytest.approx(parts, rel=1e-12)


def test_toy_components_sum():
    # hard SR for the overlap terms, zero logits for the BCE term
    ones = np.ones_like(GT)
    tv = L.tversky_from_probs(rt(SR), GT).item()
    iou = L.weighted_iou_from_probs(rt(SR), GT, ones).item()
    bce = L.weighted_bce(rt(np.zeros_like(GT)), GT, ones).item()
    assert tv + bce + iou == pytest.approx(0.5 + math.log(2) + 2 / 3, abs=1e-6)


def test_perfect_prediction_loss_vanishes():
    z = rt(np.where(GT > 0, 20.0, -20.0))
    assert L.stage_loss(z, GT).item() < 1e-6


def test_total_loss_weighting():
    rng = np.random.default_rng(4)
    z = rt(rng.normal(size=(1, 1, 8, 8)))
    g = (rng.random((1, 1, 8, 8)) > 0.5).astype(float)
    single = L.stage_loss(z, g).item()
    assert L.total_loss(z, z, z, g).item() == pytest.approx(single, rel=1e-12)
    aux = rt(rng.normal(size=(1, 1, 8, 8)))
    only_final = LossWeights(a=1.0, b=0.0, c=0.0)
    assert L.total_loss(z, aux, aux, g, only_final).item() == pytest.approx(single, rel=1e-12)


def test_deep_supervision_weighted_sum_example():
    assert L.combine_stage_losses(0.5, 1.0, 1.0) == pytest.approx(0.7, abs=1e-15)
    v = L.combine_stage_losses(rt(0.5), rt(1.0), rt(1.0)).item()
    assert v == pytest.approx(0.7, abs=1e-15)


def test_total_loss_details():
    rng = np.random.default_rng(5)
    z = rt(rng.normal(size=(1, 1, 8, 8)))
    g = (rng.random((1, 1, 8, 8)) > 0.5).astype(float)
    details = {}
    total = L.total_loss(z, z, z, g, details=details).item()
    assert set(details) >= {"final", "aux1", "aux3", "final_tversky", "aux3_bce"}
    assert total == pytest.approx(L.combine_stage_losses(details["final"], details["aux1"], details["aux3"]))
