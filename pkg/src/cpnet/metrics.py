"""Soft Jaccard training loss and pixel-level evaluation metrics
(balanced error rate plus per-class error rates)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, add_scalar, div, mul, reduce_sum, scalar_mul, sub, sum_per_sample

DEFAULT_EPSILON = 1e-7
BINARY_TOLERANCE = 1e-6


def _validate_loss_inputs(y_true: Tensor, y_pred: Tensor) -> None:
    if y_true.shape != y_pred.shape:
        raise ValueError(f"jaccard loss: shape mismatch {y_true.shape} vs {y_pred.shape}")
    t = y_true.data
    if not np.all((np.abs(t) <= BINARY_TOLERANCE) | (np.abs(t - 1) <= BINARY_TOLERANCE)):
        raise ValueError("jaccard loss: ground truth must be binary {0,1}")
    p = y_pred.data
    if p.size and (p.min() < -BINARY_TOLERANCE or p.max() > 1 + BINARY_TOLERANCE):
        raise ValueError(
            f"jaccard loss: predictions must lie in [0,1], got range [{p.min()}, {p.max()}]")


def jaccard_loss(y_true: Tensor, y_pred: Tensor, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Negative soft intersection-over-union, a scalar in [-1, 0].

    -(sum(t*p) + eps) / (sum(t) + sum(p) - sum(t*p) + eps); epsilon keeps
    the ratio defined when both tensors are all-zero (a perfect match).
    """
    _validate_loss_inputs(y_true, y_pred)
    inter = reduce_sum(mul(y_true, y_pred))
    total = sub(add(reduce_sum(y_true), reduce_sum(y_pred)), inter)
    ratio = div(add_scalar(inter, epsilon), add_scalar(total, epsilon))
    return scalar_mul(ratio, -1.0)


def batch_jaccard_loss(y_true: Tensor, y_pred: Tensor, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Mean over the batch axis of the per-sample soft Jaccard loss."""
    _validate_loss_inputs(y_true, y_pred)
    n = y_true.shape[0]
    inter = sum_per_sample(mul(y_true, y_pred))
    total = sub(add(sum_per_sample(y_true), sum_per_sample(y_pred)), inter)
    ratio = div(add_scalar(inter, epsilon), add_scalar(total, epsilon))
    return scalar_mul(reduce_sum(ratio), -1.0 / n)


def binarize(y: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold probabilities to a {0,1} uint8 mask (1 where y >= threshold)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    return (np.asarray(y) >= threshold).astype(np.uint8)


@dataclass
class ConfusionCounts:
    """Pixel counts with shadow as the positive class."""
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    __add__ = merge


def accumulate_confusion(pred: np.ndarray, truth: np.ndarray,
                         acc: ConfusionCounts | None = None) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"confusion: shape mismatch {pred.shape} vs {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    counts = ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )
    return counts if acc is None else acc.merge(counts)


@dataclass
class EvalReport:
    """BER and per-class error rates; fields are None when a class has
    no pixels and the rate is undefined."""
    ber: float | None
    per_shadow: float | None
    per_non_shadow: float | None
    counts: ConfusionCounts
    note: str = ""

    def as_text(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{100 * v:.4f}%"
        lines = [
            "metric           value",
            f"ber              {fmt(self.ber)}",
            f"per_shadow       {fmt(self.per_shadow)}",
            f"per_non_shadow   {fmt(self.per_non_shadow)}",
            f"pixels           tp={self.counts.tp} tn={self.counts.tn} fp={self.counts.fp} fn={self.counts.fn}",
        ]
        if self.note:
            lines.append(f"note             {self.note}")
        return "\n".join(lines)

    def as_keyvalues(self) -> str:
        def fmt(v):
            return "undefined" if v is None else repr(float(v))
        c = self.counts
        return "\n".join([
            f"ber={fmt(self.ber)}",
            f"per_shadow={fmt(self.per_shadow)}",
            f"per_non_shadow={fmt(self.per_non_shadow)}",
            f"tp={c.tp}", f"tn={c.tn}", f"fp={c.fp}", f"fn={c.fn}",
        ])


def compute_ber(acc: ConfusionCounts) -> EvalReport:
    """BER = 1 - (TP/(TP+FN) + TN/(TN+FP)) / 2, i.e. the mean of the two
    per-class error rates; a class absent from the ground truth leaves
    its rate (and then BER) undefined."""
    shadow_total = acc.tp + acc.fn
    non_shadow_total = acc.tn + acc.fp
    per_shadow = acc.fn / shadow_total if shadow_total > 0 else None
    per_non_shadow = acc.fp / non_shadow_total if non_shadow_total > 0 else None
    note = ""
    if per_shadow is None:
        note = "no shadow pixels in ground truth; shadow PER and BER undefined"
    if per_non_shadow is None:
        note = "no non-shadow pixels in ground truth; non-shadow PER and BER undefined"
    if per_shadow is None and per_non_shadow is None:
        note = "empty ground truth; all rates undefined"
    ber = None
    if per_shadow is not None and per_non_shadow is not None:
        ber = 1.0 - 0.5 * (acc.tp / shadow_total + acc.tn / non_shadow_total)
    return EvalReport(ber=ber, per_shadow=per_shadow, per_non_shadow=per_non_shadow,
                      counts=acc, note=note)
