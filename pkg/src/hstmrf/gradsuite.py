"""Gradient-check suites at three granularities: single ops, one block, the whole model."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import losses as L
from . import tensor as T
from .config import ModelConfig
from .encoder import HSTBlock
from .gradcheck import GradcheckReport, check_function, gradcheck
from .model import HSTMRF
from .rng import GRADCHECK, make_rng
from .tensor import Tensor, default_dtype

SCOPES = ("op", "block", "model")
OP_SEEDS = 5
# composite networks: a small step keeps the probe clear of ReLU kinks, and the
# floor absorbs round-off on parameters with an exactly-zero gradient
STEP = 1e-7
FLOOR = 1e-5


def _mask(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.random(shape) > 0.5).astype(np.float64)


def _op_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, list[np.ndarray]]]:
    """Yield (name, fn, input arrays); ``fn`` maps float64 tensors to a scalar."""
    n = rng.normal
    # a fixed random projection makes every output coordinate matter
    def proj(shape):
        return n(size=shape)

    w2 = proj((2, 3))
    yield "add_broadcast", lambda a, b: T.sum_((a + b) * w2), [n(size=(2, 3)), n(size=(1, 3))]
    yield "mul_broadcast", lambda a, b: T.sum_((a * b) * w2), [n(size=(2, 3)), n(size=(2, 1))]
    yield "div", lambda a, b: T.sum_((a / b) * w2), [n(size=(2, 3)), 1.5 + rng.random((2, 3))]
    yield "exp_log_sqrt", lambda a: T.sum_(T.log(T.exp(a) + 1.0) + T.sqrt(T.exp(a))), [n(size=(2, 3))]
    p1 = proj((2, 3, 5))
    yield "matmul", lambda a, b: T.sum_(T.matmul(a, b) * p1), [n(size=(2, 3, 4)), n(size=(4, 5))]
    p2 = proj((3, 8))
    yield "transpose_reshape", lambda a: T.sum_(T.reshape(T.transpose(a, (1, 0, 2)), (3, 8)) * p2), \
        [n(size=(2, 3, 4))]
    p3 = proj((3, 4))
    yield "getitem_concat_roll", lambda a: T.sum_(
        T.roll(T.concat([a[:, 1:], a[:, :1]], axis=1), (1,), (0,)) * p3), [n(size=(3, 4))]
    yield "amax_mean", lambda a: T.sum_(T.amax(a, axis=1)) + T.mean(a), [n(size=(3, 5))]
    for label, stride, dilation, padding in (("d1", 1, 1, 1), ("d2", 1, 2, 2), ("s2", 2, 1, 1)):
        x, w, b = n(size=(2, 2, 6, 6)), n(size=(3, 2, 3, 3)), n(size=3)
        ho = T.conv_output_size(6, 3, stride, dilation, padding)
        p = proj((2, 3, ho, ho))
        yield f"conv2d_{label}", (lambda x, w, b, s=stride, d=dilation, pd=padding, p=p:
                                  T.sum_(T.conv2d(x, w, b, s, d, pd) * p)), [x, w, b]
    p4 = proj((3, 5))
    yield "softmax", lambda a: T.sum_(T.softmax(a, axis=-1) * p4), [n(size=(3, 5))]
    p5 = proj((3,))
    yield "softpool", lambda a: T.sum_(T.softpool(a, axis=-1) * p5), [n(size=(3, 4))]
    p6 = proj((1, 2, 2, 2))
    yield "softpool2d", lambda a: T.sum_(T.softpool2d(a, 2) * p6), [n(size=(1, 2, 4, 4))]
    p7 = proj((2, 3))
    yield "global_softpool", lambda a: T.sum_(T.global_softpool(a) * p7), [n(size=(2, 3, 3, 3))]
    yield "relu_sigmoid_gelu", lambda a: T.sum_((T.relu(a) + T.sigmoid(a) + T.gelu(a)) * w2), \
        [np.sign(n(size=(2, 3))) * (0.1 + rng.random((2, 3)))]
    rm, rv = np.zeros(3), np.ones(3)
    p8 = proj((4, 3, 2, 2))
    yield "batch_norm2d", lambda x, g, b: T.sum_(
        T.batch_norm2d(x, g, b, rm.copy(), rv.copy(), training=True) * p8), \
        [n(size=(4, 3, 2, 2)), 1 + 0.1 * n(size=3), n(size=3)]
    p9 = proj((3, 6))
    yield "layer_norm", lambda x, g, b: T.sum_(T.layer_norm(x, g, b) * p9), \
        [n(size=(3, 6)), 1 + 0.1 * n(size=6), n(size=6)]
    drop_seed = int(rng.integers(1 << 30))
    yield "dropout", lambda a: T.sum_(T.dropout(a, 0.5, np.random.default_rng(drop_seed), True) * w2), \
        [n(size=(2, 3))]
    p10 = proj((1, 2, 5, 7))
    yield "resize_bilinear", lambda a: T.sum_(T.resize_bilinear(a, (5, 7)) * p10), \
        [n(size=(1, 2, 3, 4))]
    p11 = proj((1, 1, 6, 6))
    yield "upsample2x", lambda a: T.sum_(T.upsample2x(a) * p11), [n(size=(1, 1, 3, 3))]
    gt = _mask(rng, (2, 1, 8, 8))
    logits = n(size=(2, 1, 8, 8))
    yield "bce_with_logits", lambda a: T.mean(T.bce_with_logits(a, gt)), [logits]
    yield "tversky", lambda a: L.tversky_loss(a, gt), [logits]
    yield "soft_dice", lambda a: L.soft_dice_from_probs(T.sigmoid(a), gt), [logits]
    yield "weighted_iou", lambda a: L.weighted_iou(a, gt), [logits]
    yield "weighted_bce", lambda a: L.weighted_bce(a, gt), [logits]
    yield "total_loss", lambda a, b, c: L.total_loss(a, b, c, gt), \
        [logits, n(size=(2, 1, 8, 8)), n(size=(2, 1, 8, 8))]


def op_suite(seed: int = 0, seeds: int = OP_SEEDS, tol: float = 1e-4) -> list[GradcheckReport]:
    """Every primitive over ``seeds`` random draws; one report per primitive (worst seed)."""
    worst: dict[str, GradcheckReport] = {}
    checked: dict[str, int] = {}
    for k in range(seeds):
        rng = make_rng(seed, GRADCHECK, 0, k)
        with default_dtype(np.float64):
            for name, fn, arrays in _op_cases(rng):
                rep = check_function(fn, arrays, step=1e-5, tol=tol, name=name)
                checked[name] = checked.get(name, 0) + rep.checked
                if name not in worst or rep.max_rel_error > worst[name].max_rel_error:
                    worst[name] = rep
    for name, rep in worst.items():
        rep.checked = checked[name]
    return list(worst.values())


def _param_check(name: str, module, loss_fn: Callable[[], Tensor], extra: list[Tensor],
                 tol: float, max_coords: int | None, seed: int) -> GradcheckReport:
    params = [p for _, p in module.named_parameters()]
    return gradcheck(loss_fn, extra + params, step=STEP, tol=tol, name=name,
                     max_coords=max_coords, seed=seed, floor=FLOOR)


def block_suite(seed: int = 0, tol: float = 1e-3) -> list[GradcheckReport]:
    """One heterogeneous block (W and SW variants) on a 1x8x8x8 grid pair, d = 8."""
    cfg = ModelConfig(C=8, d=8, n_heads=2, window=4)
    reports = []
    with default_dtype(np.float64):
        for shifted in (False, True):
            rng = make_rng(seed, GRADCHECK, 1, int(shifted))
            block = HSTBlock(8, cfg, shifted, rng).astype(np.float64)
            x1 = Tensor(rng.normal(size=(1, 8, 8, 8)), requires_grad=True)
            x2 = Tensor(rng.normal(size=(1, 8, 8, 8)), requires_grad=True)
            p1, p2 = rng.normal(size=(1, 8, 8, 8)), rng.normal(size=(1, 8, 8, 8))

            def f():
                y1, y2 = block([x1, x2])
                return T.sum_(y1 * p1) + T.sum_(y2 * p2)

            name = "hst_block_" + ("sw" if shifted else "w")
            reports.append(_param_check(name, block, f, [x1, x2], tol, 48, seed))
    return reports


def model_suite(seed: int = 0, tol: float = 1e-3, coords: int = 6) -> list[GradcheckReport]:
    """Full network (C=4, 32x32, window 2) under the composite loss, sampled coordinates."""
    cfg = ModelConfig(C=4, d=8, n_heads=2, window=2)
    with default_dtype(np.float64):
        model = HSTMRF(cfg, seed).astype(np.float64)
        rng = make_rng(seed, GRADCHECK, 2)
        image = Tensor(rng.random((1, 3, 32, 32)), requires_grad=True)
        gt = _mask(rng, (1, 1, 32, 32))
        drop_seed = int(rng.integers(1 << 30))

        def f():
            logits, aux1, aux3 = model(image, np.random.default_rng(drop_seed))
            return L.total_loss(logits, aux1, aux3, gt)

        leaves = [("image", image)] + list(model.named_parameters())
        rep = gradcheck(f, [t for _, t in leaves], step=STEP, tol=tol, name="model",
                        max_coords=coords, seed=seed, floor=FLOOR)
        # split per leaf so a failure names the offending parameter
        return [GradcheckReport(name, err, tol, [err], min(coords, leaf.size))
                for (name, leaf), err in zip(leaves, rep.per_input)]


def run_scope(scope: str, seed: int = 0) -> list[GradcheckReport]:
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {', '.join(SCOPES)}")
    return {"op": op_suite, "block": block_suite, "model": model_suite}[scope](seed)
