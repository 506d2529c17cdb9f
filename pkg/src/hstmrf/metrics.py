"""Hard-threshold evaluation metrics: mDice, mIoU, recall, precision."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

EPS = 1e-8


def confusion_counts(pred_logits: np.ndarray, gt: np.ndarray, threshold: float = 0.5
                     ) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) after sigmoid + threshold; a probability equal to the
    threshold counts as positive."""
    pred_logits = np.asarray(pred_logits)
    gt = np.asarray(gt)
    if pred_logits.shape != gt.shape:
        raise ValueError(f"prediction {pred_logits.shape} and ground truth {gt.shape} differ")
    pred = special.expit(pred_logits) >= threshold
    truth = gt > 0.5
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    return tp, fp, fn, tn


def dice_iou(tp: int, fp: int, fn: int) -> tuple[float, float]:
    if tp + fp + fn == 0:
        # empty ground truth and empty prediction
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn + EPS), tp / (tp + fp + fn + EPS)


@dataclass
class EvalResult:
    mDice: float
    mIoU: float
    recall: float
    precision: float
    dice: list[float] = field(default_factory=list)
    iou: list[float] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {"mDice": self.mDice, "mIoU": self.mIoU, "recall": self.recall,
                "precision": self.precision}


def evaluate(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], threshold: float = 0.5) -> EvalResult:
    """Per-image Dice/IoU averaged over images; recall/precision pooled over all pixels."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not len(preds):
        raise ValueError("evaluate needs at least one image")
    dice, iou = [], []
    TP = FP = FN = 0
    for p, g in zip(preds, gts):
        tp, fp, fn, _ = confusion_counts(p, g, threshold)
        d, j = dice_iou(tp, fp, fn)
        dice.append(d)
        iou.append(j)
        TP, FP, FN = TP + tp, FP + fp, FN + fn
    recall = 1.0 if TP + FN == 0 else TP / (TP + FN + EPS)
    precision = 1.0 if TP + FP == 0 else TP / (TP + FP + EPS)
    return EvalResult(float(np.mean(dice)), float(np.mean(iou)), recall, precision, dice, iou)
