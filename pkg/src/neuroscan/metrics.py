"""Losses and evaluation metrics for classification and segmentation.

Losses are torch functions (differentiable, used by the training engine).
Reported metrics are numpy functions over hard masks / label lists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from scipy import ndimage

from neuroscan.dataset import LABELS

EPSILON = 1e-7
LOSS_SMOOTH = 1e-6


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


# ----------------------------------------------------------------------- losses


def categorical_cross_entropy(probs, labels) -> torch.Tensor:
    """Mean of ``-log p(true class)`` with probabilities clipped to [eps, 1-eps]."""
    p, y = _as_tensor(probs), _as_tensor(labels).to(_as_tensor(probs).dtype)
    if p.shape != y.shape or p.ndim != 2:
        raise ValueError(f"probs {tuple(p.shape)} and one-hot labels {tuple(y.shape)} must be (N, C)")
    p = p.clamp(EPSILON, 1 - EPSILON)
    return -(y * torch.log(p)).sum(dim=1).mean()


def binary_cross_entropy(pred, truth) -> torch.Tensor:
    p, t = _as_tensor(pred), _as_tensor(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    t = t.to(p.dtype)
    p = p.clamp(EPSILON, 1 - EPSILON)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()


def soft_dice(pred, truth, smooth: float = LOSS_SMOOTH) -> torch.Tensor:
    """Differentiable Dice over all elements: (2*sum(p*t) + s) / (sum p + sum t + s)."""
    p, t = _as_tensor(pred), _as_tensor(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    t = t.to(p.dtype)
    return (2 * (p * t).sum() + smooth) / (p.sum() + t.sum() + smooth)


def dice_loss(pred, truth) -> torch.Tensor:
    return 1 - soft_dice(pred, truth, smooth=LOSS_SMOOTH)


def combined_seg_loss(pred, truth, w_bce: float = 1.0, w_dice: float = 1.0) -> torch.Tensor:
    """Weighted sum ``w_bce * BCE + w_dice * dice_loss``."""
    if w_bce < 0 or w_dice < 0:
        raise ValueError("loss weights must be non-negative")
    if w_bce == 0 and w_dice == 0:
        raise ValueError("at least one of w_bce, w_dice must be positive")
    loss = 0
    if w_bce:
        loss = loss + w_bce * binary_cross_entropy(pred, truth)
    if w_dice:
        loss = loss + w_dice * dice_loss(pred, truth)
    return loss


# ------------------------------------------------------------ overlap metrics


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(pred), np.asarray(truth)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice_coefficient(pred, truth, smooth: float = 0.0) -> float:
    """Dice on hard masks or soft maps.

    With ``smooth == 0`` two empty inputs score 1.0 by convention.
    """
    a, b = _pair(pred, truth)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    inter = float((a * b).sum())
    denom = float(a.sum() + b.sum())
    if smooth == 0 and denom == 0:
        return 1.0
    return (2 * inter + smooth) / (denom + smooth)


def iou(pred, truth) -> float:
    a, b = _pair(pred, truth)
    a, b = a.astype(bool), b.astype(bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


_DENSE_PAIRS = 4096


def _reduce(d: np.ndarray, percentile: float | None) -> float:
    return float(d.max() if percentile is None else np.percentile(d, percentile))


def _directed(a: np.ndarray, b: np.ndarray, percentile: float | None) -> float:
    # distance from every pixel to the nearest foreground pixel of b
    dist_to_b = ndimage.distance_transform_edt(~b)
    return _reduce(dist_to_b[a], percentile)


def hausdorff(pred, truth, percentile: float | None = None) -> float:
    """Symmetric Hausdorff distance (pixels) between two foreground sets.

    Both empty gives 0; exactly one empty gives ``inf`` (undefined).
    ``percentile=95`` selects the HD95 variant.
    """
    a, b = _pair(pred, truth)
    a, b = a.astype(bool), b.astype(bool)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return float("inf")
    pa, pb = np.argwhere(a), np.argwhere(b)
    if len(pa) * len(pb) <= _DENSE_PAIRS:
        # small sets: all pairwise distances beat two distance transforms
        d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
        return max(_reduce(d.min(1), percentile), _reduce(d.min(0), percentile))
    return max(_directed(a, b, percentile), _directed(b, a, percentile))


@dataclass(frozen=True)
class SegScores:
    dice: float
    iou: float
    hausdorff: float

    def to_dict(self) -> dict:
        return {
            "dice": self.dice,
            "iou": self.iou,
            "hausdorff": self.hausdorff if np.isfinite(self.hausdorff) else None,
        }


def seg_scores(pred, truth) -> SegScores:
    return SegScores(dice=dice_coefficient(pred, truth), iou=iou(pred, truth), hausdorff=hausdorff(pred, truth))


# -------------------------------------------------------------- classification


def _label_index(label, class_order: Sequence[str]) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        if 0 <= label < len(class_order):
            return int(label)
    elif label in class_order:
        return class_order.index(label)
    raise ValueError(f"unknown label {label!r}; expected one of {tuple(class_order)}")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_order: tuple[str, ...] = LABELS

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_list(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def confusion_matrix(preds, truths, class_order: Sequence[str] = LABELS) -> ConfusionMatrix:
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions vs {len(truths)} labels")
    if not preds:
        raise ValueError("need at least one prediction")
    k = len(class_order)
    counts = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(preds, truths):
        counts[_label_index(t, class_order), _label_index(p, class_order)] += 1
    return ConfusionMatrix(counts=counts, class_order=tuple(class_order))


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, True) if den > 0 else (0.0, False)


@dataclass
class ClassificationReport:
    matrix: ConfusionMatrix
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    support: dict[str, int]
    accuracy: float
    # "<metric>:<class>" entries whose denominator was zero (reported as 0)
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "class_order": list(self.matrix.class_order),
            "confusion_matrix": self.matrix.to_list(),
            "per_class": {
                c: {
                    "precision": self.precision[c],
                    "recall": self.recall[c],
                    "f1": self.f1[c],
                    "support": self.support[c],
                }
                for c in self.matrix.class_order
            },
            "accuracy": self.accuracy,
            "total": self.matrix.total,
            "undefined": list(self.undefined),
        }


def confusion_and_report(preds, truths, class_order: Sequence[str] = LABELS) -> ClassificationReport:
    cm = confusion_matrix(preds, truths, class_order)
    c = cm.counts
    tp = np.diag(c)
    precision, recall, f1, support, undefined = {}, {}, {}, {}, []
    for i, name in enumerate(cm.class_order):
        p, p_ok = _ratio(tp[i], c[:, i].sum())
        r, r_ok = _ratio(tp[i], c[i, :].sum())
        f, f_ok = _ratio(2 * p * r, p + r)
        precision[name], recall[name], f1[name] = p, r, f
        support[name] = int(c[i, :].sum())
        undefined += [f"{m}:{name}" for m, ok in (("precision", p_ok), ("recall", r_ok), ("f1", f_ok)) if not ok]
    return ClassificationReport(
        matrix=cm,
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        accuracy=float(tp.sum() / c.sum()),
        undefined=undefined,
    )


class OneVsRest(NamedTuple):
    sensitivity: float
    specificity: float
    sensitivity_defined: bool = True
    specificity_defined: bool = True


def sensitivity_specificity(cm: ConfusionMatrix, positive_class) -> OneVsRest:
    i = _label_index(positive_class, cm.class_order)
    c = cm.counts
    tp = c[i, i]
    fn = c[i, :].sum() - tp
    fp = c[:, i].sum() - tp
    tn = c.sum() - tp - fn - fp
    sens, s_ok = _ratio(tp, tp + fn)
    spec, p_ok = _ratio(tn, tn + fp)
    return OneVsRest(float(sens), float(spec), s_ok, p_ok)
