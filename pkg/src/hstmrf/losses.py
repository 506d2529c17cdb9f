"""Composite segmentation objective with deep supervision.

All losses take logits shaped (N, 1, H, W) and a constant binary mask of
the same shape; per-image losses are averaged over the batch.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .config import LossWeights
from .tensor import ShapeError, Tensor

SMOOTH = 1e-6
_IMAGE_AXES = (1, 2, 3)


def _check(pred: Tensor, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.ndim != 4:
        raise ShapeError(f"expected (N, 1, H, W) maps, got {pred.shape}")
    return gt


def box_mean(x: np.ndarray, k: int) -> np.ndarray:
    """Mean over a k x k window centred on each pixel of (..., H, W).

    Only pixels inside the image are averaged, so a constant map is left
    unchanged (including at the borders).
    """
    r = k // 2
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)]
    integral = np.pad(np.cumsum(np.cumsum(x, axis=-1), axis=-2), pad)
    i0 = np.clip(np.arange(h) - r, 0, h)
    i1 = np.clip(np.arange(h) + r + 1, 0, h)
    j0 = np.clip(np.arange(w) - r, 0, w)
    j1 = np.clip(np.arange(w) + r + 1, 0, w)
    total = (integral[..., i1[:, None], j1[None, :]] - integral[..., i0[:, None], j1[None, :]]
             - integral[..., i1[:, None], j0[None, :]] + integral[..., i0[:, None], j0[None, :]])
    count = (i1 - i0)[:, None] * (j1 - j0)[None, :]
    return total / count


def boundary_weights(gt: np.ndarray, gain: float = 5.0, pool_k: int = 7) -> np.ndarray:
    """Pixel weights 1 + gain * |boxmean(gt) - gt|, large near mask boundaries."""
    gt = np.asarray(gt, dtype=np.float64)
    return 1.0 + gain * np.abs(box_mean(gt, pool_k) - gt)


def tversky_from_probs(probs: Tensor, gt: np.ndarray, eta: float = 0.7, gamma: float = 0.3,
                       smooth: float = SMOOTH) -> Tensor:
    """1 - |GT∩SR| / (|GT∩SR| + eta |SR - GT| + gamma |GT - SR|) with soft counts."""
    g = _check(probs, gt)
    inter = T.sum_(probs * g, _IMAGE_AXES)
    fp = T.sum_(probs * (1.0 - g), _IMAGE_AXES)
    fn = T.sum_(T.mul(1.0 - probs, g), _IMAGE_AXES)
    index = (inter + smooth) / (inter + T.scale(fp, eta) + T.scale(fn, gamma) + smooth)
    return T.mean(1.0 - index)


def tversky_loss(logits: Tensor, gt: np.ndarray, eta: float = 0.7, gamma: float = 0.3) -> Tensor:
    return tversky_from_probs(T.sigmoid(logits), gt, eta, gamma)


def soft_dice_from_probs(probs: Tensor, gt: np.ndarray, smooth: float = SMOOTH) -> Tensor:
    g = _check(probs, gt)
    inter = T.sum_(probs * g, _IMAGE_AXES)
    total = T.sum_(probs, _IMAGE_AXES) + Tensor(g.sum(axis=_IMAGE_AXES))
    return T.mean(1.0 - (T.scale(inter, 2.0) + 2 * smooth) / (total + 2 * smooth))


def weighted_bce(logits: Tensor, gt: np.ndarray, weights: Optional[np.ndarray] = None,
                 gain: float = 5.0, pool_k: int = 7) -> Tensor:
    """Boundary-weighted binary cross-entropy, sum(w * bce) / sum(w) per image."""
    g = _check(logits, gt)
    w = boundary_weights(g, gain, pool_k) if weights is None else np.asarray(weights)
    w = w.astype(logits.dtype)
    per_pixel = T.bce_with_logits(logits, g)
    return T.mean(T.sum_(per_pixel * w, _IMAGE_AXES) / Tensor(w.sum(axis=_IMAGE_AXES)))


def weighted_iou_from_probs(probs: Tensor, gt: np.ndarray, weights: Optional[np.ndarray] = None,
                            gain: float = 5.0, pool_k: int = 7, smooth: float = SMOOTH) -> Tensor:
    """1 - sum(w g s) / sum(w (g + s - g s)) per image."""
    g = _check(probs, gt)
    w = boundary_weights(g, gain, pool_k) if weights is None else np.asarray(weights)
    w = w.astype(probs.dtype)
    inter = T.sum_(probs * (w * g), _IMAGE_AXES)
    union = T.sum_(probs * (w * (1.0 - g)), _IMAGE_AXES) + Tensor((w * g).sum(axis=_IMAGE_AXES))
    return T.mean(1.0 - (inter + smooth) / (union + smooth))


def weighted_iou(logits: Tensor, gt: np.ndarray, weights: Optional[np.ndarray] = None,
                 gain: float = 5.0, pool_k: int = 7) -> Tensor:
    return weighted_iou_from_probs(T.sigmoid(logits), gt, weights, gain, pool_k)


def stage_components(logits: Tensor, gt: np.ndarray, w: LossWeights = LossWeights()) -> dict[str, Tensor]:
    weights = boundary_weights(np.asarray(gt), w.boundary_gain, w.pool_k)
    probs = T.sigmoid(logits)
    return {
        "iou": weighted_iou_from_probs(probs, gt, weights),
        "bce": weighted_bce(logits, gt, weights),
        "tversky": tversky_from_probs(probs, gt, w.eta, w.gamma),
    }


def stage_loss(logits: Tensor, gt: np.ndarray, w: LossWeights = LossWeights()) -> Tensor:
    """Unweighted sum of weighted IoU, weighted BCE and Tversky losses."""
    parts = stage_components(logits, gt, w)
    return parts["iou"] + parts["bce"] + parts["tversky"]


def combine_stage_losses(final, aux1, aux3, w: LossWeights = LossWeights()):
    """a * final + b * aux1 + c * aux3; works on floats and tensors alike."""
    if isinstance(final, Tensor):
        return T.scale(final, w.a) + T.scale(aux1, w.b) + T.scale(aux3, w.c)
    return w.a * final + w.b * aux1 + w.c * aux3


def total_loss(logits: Tensor, aux1: Tensor, aux3: Tensor, gt: np.ndarray,
               w: LossWeights = LossWeights(), details: Optional[dict] = None) -> Tensor:
    """a L(gt, Y) + b L(gt, aux1) + c L(gt, aux3).

    If ``details`` is a dict it receives the per-head component values as floats.
    """
    per_head = []
    for name, head in (("final", logits), ("aux1", aux1), ("aux3", aux3)):
        parts = stage_components(head, gt, w)
        loss = parts["iou"] + parts["bce"] + parts["tversky"]
        if details is not None:
            for k, v in parts.items():
                details[f"{name}_{k}"] = v.item()
            details[name] = loss.item()
        per_head.append(loss)
    return combine_stage_losses(*per_head, w)
