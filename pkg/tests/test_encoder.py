import math
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from hstmrf import tensor as T
from hstmrf.config import ConfigError, ModelConfig
from hstmrf.encoder import (AdaptivePatchEmbed, Encoder, HeteroWindowAttention, HSTBlock, PatchMerging,
                            expected_encoder_shapes, heterogeneous_attention, merge_neighbourhoods,
                            shift_size, shifted_window_mask, window_partition, window_reverse, windowed)
from hstmrf.nn import Conv2d
from hstmrf.tensor import Tensor, default_dtype


@pytest.fixture(autouse=True)
def f64():
    with default_dtype(np.float64):
        yield


def rt(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def brute_attention(q, k, v, score_scale, scale):
    """Row-by-row softmax attention with explicit loops."""
    n = q.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        s = np.array([score_scale * q[i] @ k[j] / scale for j in range(n)])
        e = np.exp(s - s.max())
        w = e / e.sum()
        for j in range(n):
            out[i] += w[j] * v[j]
    return out


# ------------------------------------------------------------- attention
@pytest.mark.parametrize("n", [1, 2, 4, 8])
@pytest.mark.parametrize("d", [4, 8, 16])
def test_tied_branches_match_doubled_score_oracle(n, d):
    rng = np.random.default_rng(n * 100 + d)
    p = rng.normal(size=(n, d))
    wq, wk, wv = (rng.normal(size=(d, d)) / math.sqrt(d) for _ in range(3))
    q, k, v = p @ wq, p @ wk, p @ wv
    z1, z2 = heterogeneous_attention(rt(q), rt(k), rt(v), rt(q), rt(k), rt(v))
    oracle = brute_attention(q, k, v, 2.0, math.sqrt(2 * d))
    npt.assert_allclose(z1.data, oracle, atol=1e-6, rtol=0)
    npt.assert_allclose(z2.data, oracle, atol=1e-6, rtol=0)


def test_shared_softmax_rows_drive_both_branches():
    rng = np.random.default_rng(11)
    q1, k1, v1, q2, k2, v2 = (rng.normal(size=(3, 6, 8)) for _ in range(6))
    z1, z2, (w1, w2) = heterogeneous_attention(*(rt(a) for a in (q1, k1, v1, q2, k2, v2)),
                                               return_weights=True)
    npt.assert_allclose(w1.data, w2.data, atol=1e-7, rtol=0)
    npt.assert_allclose(w1.data.sum(-1), 1.0)
    npt.assert_allclose(z1.data, w1.data @ v1, atol=1e-7)
    npt.assert_allclose(z2.data, w2.data @ v2, atol=1e-7)
    # the weights mix both branches' scores
    s = (q1 @ k1.swapaxes(-1, -2) + q2 @ k2.swapaxes(-1, -2)) / math.sqrt(16)
    e = np.exp(s - s.max(-1, keepdims=True))
    npt.assert_allclose(w1.data, e / e.sum(-1, keepdims=True), atol=1e-12)


def test_single_token_returns_values():
    rng = np.random.default_rng(0)
    v1, v2 = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    z1, z2 = heterogeneous_attention(rt(rng.normal(size=(1, 4))), rt(rng.normal(size=(1, 4))), rt(v1),
                                     rt(rng.normal(size=(1, 4))), rt(rng.normal(size=(1, 4))), rt(v2))
    npt.assert_allclose(z1.data, v1)
    npt.assert_allclose(z2.data, v2)


def test_zero_queries_give_uniform_mean():
    rng = np.random.default_rng(1)
    zeros = np.zeros((5, 4))
    v1, v2 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    z1, z2 = heterogeneous_attention(rt(zeros), rt(rng.normal(size=(5, 4))), rt(v1),
                                     rt(zeros), rt(rng.normal(size=(5, 4))), rt(v2))
    npt.assert_allclose(z1.data, np.tile(v1.mean(0), (5, 1)))
    npt.assert_allclose(z2.data, np.tile(v2.mean(0), (5, 1)))


# --------------------------------------------------------------- windows
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2), st.sampled_from([2, 4]), st.integers(1, 3), st.integers(1, 3), st.integers(1, 5))
def test_partition_reverse_round_trip(b, window, gh, gw, c):
    x = np.random.default_rng(b + gh).normal(size=(b, gh * window, gw * window, c))
    wins = window_partition(rt(x), window)
    assert wins.shape == (b * gh * gw, window * window, c)
    back = window_reverse(wins, window, gh * window, gw * window)
    assert np.array_equal(back.data, x)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 7))
def test_shift_round_trip(s):
    x = np.random.default_rng(s).normal(size=(1, 8, 8, 3))
    y = T.roll(T.roll(rt(x), (-s, -s), (1, 2)), (s, s), (1, 2))
    assert np.array_equal(y.data, x)


def test_window_partition_groups_rows_first():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    wins = window_partition(rt(x), 2).data[..., 0]
    npt.assert_array_equal(wins[0], [0, 1, 4, 5])
    npt.assert_array_equal(wins[1], [2, 3, 6, 7])


def test_shift_disabled_when_one_window_covers_grid():
    assert shift_size(4, 4) == 0
    assert shift_size(8, 4) == 2


def _attn(dim=8, hidden=8, heads=2, window=4, seed=0):
    return HeteroWindowAttention(dim, hidden, heads, np.random.default_rng(seed), window).astype(np.float64)


def _influence(attn, shift, pos, window=4, size=8):
    rng = np.random.default_rng(5)
    x1, x2 = rng.normal(size=(1, size, size, 8)), rng.normal(size=(1, size, size, 8))
    base = windowed(attn, (rt(x1), rt(x2)), window, shift)
    x1p = x1.copy()
    x1p[0, pos[0], pos[1]] += 1.0
    pert = windowed(attn, (rt(x1p), rt(x2)), window, shift)
    changed = np.zeros((size, size), bool)
    for a, b in zip(base, pert):
        changed |= np.abs(a.data - b.data).max(-1)[0] > 0
    return changed


@pytest.mark.parametrize("pos", [(0, 0), (3, 5), (6, 2), (7, 7)])
def test_no_cross_window_influence_unshifted(pos):
    changed = _influence(_attn(), 0, pos)
    allowed = np.zeros((8, 8), bool)
    allowed[pos[0] // 4 * 4:(pos[0] // 4 + 1) * 4, pos[1] // 4 * 4:(pos[1] // 4 + 1) * 4] = True
    assert changed.any()
    assert not (changed & ~allowed).any()


@pytest.mark.parametrize("pos", [(0, 0), (1, 6), (5, 1), (7, 7), (3, 3)])
def test_shifted_windows_never_mix_wrapped_tokens(pos):
    size, window, s = 8, 4, 2
    changed = _influence(_attn(), s, pos)
    # oracle: same window in the rolled frame and no wrap-around between the two tokens
    def rolled(i):
        return (i - s) % size
    allowed = np.zeros((size, size), bool)
    for i in range(size):
        for j in range(size):
            same_win = (rolled(i) // window == rolled(pos[0]) // window
                        and rolled(j) // window == rolled(pos[1]) // window)
            contiguous = abs(i - pos[0]) < window and abs(j - pos[1]) < window
            allowed[i, j] = same_win and contiguous
    assert changed[pos]
    assert not (changed & ~allowed).any()


def test_masked_cross_region_weights_are_exactly_zero():
    mask = shifted_window_mask(8, 8, 4, 2)
    assert mask.shape == (4, 16, 16)
    rng = np.random.default_rng(3)
    q1, k1, v1, q2, k2, v2 = (rt(rng.normal(size=(4, 1, 16, 4))) for _ in range(6))
    _, _, (w, _) = heterogeneous_attention(q1, k1, v1, q2, k2, v2, mask=mask, return_weights=True)
    blocked = (mask != 0)[:, None]
    assert (w.data[np.broadcast_to(blocked, w.shape)] == 0.0).all()
    assert mask[0].max() == 0  # the top-left window is never split


@pytest.mark.parametrize("shift", [0, 2])
def test_constant_field_stays_constant(shift):
    x = np.full((1, 8, 8, 8), 0.3)
    y1, y2 = windowed(_attn(), (rt(x), rt(x)), 4, shift)
    for y in (y1, y2):
        npt.assert_allclose(y.data, np.broadcast_to(y.data[0, 0, 0], y.shape), atol=1e-12)


# ---------------------------------------------------------------- blocks
def _cfg(**kw):
    return ModelConfig(**{"C": 8, "d": 8, "n_heads": 2, "window": 4, **kw})


def test_block_with_zeroed_output_layers_is_identity():
    blk = HSTBlock(8, _cfg(), True, np.random.default_rng(0)).astype(np.float64)
    for lin in (blk.attn.proj1, blk.attn.proj2, *(m.fc2 for m in blk.mlp)):
        lin.weight.data[...] = 0
        lin.bias.data[...] = 0
    rng = np.random.default_rng(1)
    x1, x2 = rng.normal(size=(1, 8, 8, 8)), rng.normal(size=(1, 8, 8, 8))
    y1, y2 = blk([rt(x1), rt(x2)])
    npt.assert_array_equal(y1.data, x1)
    npt.assert_array_equal(y2.data, x2)


def test_w_sw_pair_preserves_shape():
    rng = np.random.default_rng(0)
    xs = [rt(rng.normal(size=(2, 8, 8, 8))) for _ in range(2)]
    for shifted in (False, True):
        xs = HSTBlock(8, _cfg(), shifted, rng).astype(np.float64)(xs)
    assert [x.shape for x in xs] == [(2, 8, 8, 8)] * 2


@pytest.mark.parametrize("mode,coupled", [("hetero", True), ("independent", False)])
def test_branch_coupling_depends_on_mode(mode, coupled):
    blk = HSTBlock(8, _cfg(), False, np.random.default_rng(0), mode=mode).astype(np.float64)
    rng = np.random.default_rng(2)
    x1, x2 = rng.normal(size=(1, 8, 8, 8)), rng.normal(size=(1, 8, 8, 8))
    a = blk([rt(x1), rt(x2)])[0].data
    b = blk([rt(x1), rt(x2 + rng.normal(size=x2.shape))])[0].data
    assert (not np.array_equal(a, b)) == coupled


def test_block_mode_parameter_names():
    rng = np.random.default_rng(0)
    names = {m: {n for n, _ in HSTBlock(8, _cfg(), False, rng, mode=m).named_parameters()}
             for m in ("hetero", "independent", "single")}
    assert "attn.q2.weight" in names["hetero"]
    assert {"attn.0.q.weight", "attn.1.q.weight"} <= names["independent"]
    assert "attn.q.weight" in names["single"] and "mlp.1.fc1.weight" not in names["single"]


# ------------------------------------------------------ embed & merging
def test_patch_embedding_shape_and_count():
    emb = AdaptivePatchEmbed(16, 32, np.random.default_rng(0)).astype(np.float64)
    out = emb(rt(np.random.default_rng(1).normal(size=(1, 16, 32, 32))))
    assert out.shape == (1, 16, 16, 32)
    assert out.shape[1] * out.shape[2] == 256


def test_patch_embedding_softpool_component():
    emb = AdaptivePatchEmbed(2, 4, np.random.default_rng(0)).astype(np.float64)
    emb.fc.weight.data[...] = np.vstack([np.eye(2), np.zeros((2, 2))])  # identity extension
    x = np.zeros((1, 2, 2, 2))
    x[0, 0, 0, 0] = math.log(2)
    x[0, 1] = 0.7
    out = emb(rt(x)).data[0, 0, 0]
    npt.assert_allclose(out[0], 2 * math.log(2) / 5)
    assert round(out[0], 4) == 0.2773
    npt.assert_allclose(out[1], 0.7)
    npt.assert_allclose(out[2:], 0.0)


def test_merge_order_is_a_permutation():
    x = np.arange(2 * 2 * 3, dtype=np.float64).reshape(1, 2, 2, 3)
    v = merge_neighbourhoods(rt(x)).data[0, 0, 0]
    npt.assert_array_equal(v, np.concatenate([x[0, 0, 0], x[0, 1, 0], x[0, 0, 1], x[0, 1, 1]]))
    assert sorted(v) == list(range(12))


def test_patch_merging_shape_and_constant_field():
    pm = PatchMerging(4, np.random.default_rng(0)).astype(np.float64)
    assert pm(rt(np.random.default_rng(1).normal(size=(2, 8, 8, 4)))).shape == (2, 4, 4, 8)
    pm.norm.weight.data[...] = 0
    pm.norm.bias.data[...] = 1.0
    pm.reduction.weight.data[...] = 1.0 / 16
    out = pm(rt(np.full((1, 4, 4, 4), 2.5))).data
    npt.assert_allclose(out, 1.0)


# -------------------------------------------------------- stem and down
def test_stem_zero_input_zero_bias_is_zero_pre_bn():
    enc = Encoder(_cfg(), np.random.default_rng(0)).astype(np.float64)
    for conv in (s.conv for s in enc.stem):
        assert conv.weight.shape[1:] == (3, 3, 3)
        npt.assert_array_equal(conv(rt(np.zeros((1, 3, 8, 8)))).data, 0.0)


def test_dilated_stem_equals_inflated_kernel():
    enc = Encoder(_cfg(), np.random.default_rng(0)).astype(np.float64)
    conv = enc.stem[1].conv
    assert conv.dilation == 2 and conv.padding == 2
    big = Conv2d(3, 8, 5, np.random.default_rng(1), padding=2).astype(np.float64)
    big.weight.data[...] = 0
    big.weight.data[:, :, ::2, ::2] = conv.weight.data
    big.bias.data[...] = conv.bias.data
    x = rt(np.random.default_rng(2).normal(size=(1, 3, 8, 8)))
    npt.assert_allclose(conv(x).data, big(x).data, atol=1e-12)


def test_down_receptive_field_and_averaging():
    enc = Encoder(_cfg(), np.random.default_rng(0)).astype(np.float64)
    conv = enc.down[0].conv
    x = np.random.default_rng(3).normal(size=(1, 8, 8, 8))
    y = conv(rt(x)).data
    assert y.shape == (1, 16, 4, 4)
    x2 = x.copy()
    x2[:, :, 2:, :] += 1.0
    x2[:, :, :, 2:] += 1.0
    npt.assert_array_equal(conv(rt(x2)).data[:, :, 0, 0], y[:, :, 0, 0])
    conv.weight.data[...] = 1.0 / (8 * 4)
    conv.bias.data[...] = 0
    npt.assert_allclose(conv(rt(np.full((1, 8, 4, 4), 3.0))).data, 3.0)


# ------------------------------------------------------------- encoder
@pytest.mark.parametrize("C,size,window", [(8, 64, 4), (4, 32, 2)])
def test_encoder_stage_shapes(C, size, window):
    enc = Encoder(_cfg(C=C, window=window), np.random.default_rng(0))
    out = enc(Tensor(np.random.default_rng(1).random((1, 3, size, size))))
    assert out.branches == 2
    expected = expected_encoder_shapes(C, size, size)
    assert out.shapes() == [expected, expected]
    if (C, size) == (8, 64):
        assert expected == [(8, 64, 64), (16, 32, 32), (32, 16, 16), (64, 8, 8), (128, 4, 4)]


def test_one_rf_has_single_branch():
    enc = Encoder(_cfg(one_rf=True), np.random.default_rng(0))
    out = enc(Tensor(np.random.default_rng(1).random((1, 3, 64, 64))))
    assert out.branches == 1
    assert len(enc.stem) == 1 and enc.stem[0].conv.dilation == 1


def test_encoder_error_names_stage():
    enc = Encoder(_cfg(), np.random.default_rng(0))
    enc.merge4[0] = PatchMerging(8, np.random.default_rng(1))  # wrong width
    with pytest.raises(T.ShapeError, match="encoder stage 4"):
        enc(Tensor(np.random.default_rng(1).random((1, 3, 64, 64))))


def test_encoder_rejects_bad_input_size():
    enc = Encoder(_cfg(), np.random.default_rng(0))
    with pytest.raises(ConfigError, match="divisible by 16"):
        enc(Tensor(np.zeros((1, 3, 40, 40))))
    with pytest.raises(ConfigError, match="window 4 must divide"):
        enc(Tensor(np.zeros((1, 3, 48, 48))))


def test_no_ape_uses_flatten_embedding():
    enc = Encoder(replace(_cfg(), no_ape=True), np.random.default_rng(0))
    assert enc.embed[0].fc.weight.shape == (32, 64)
    assert Encoder(_cfg(), np.random.default_rng(0)).embed[0].fc.weight.shape == (32, 16)
