"""Training objective and evaluation metrics.

The objective is a three-term sum: stabilized binary cross entropy on
the logits, smoothed Jaccard distance on the sigmoid probabilities, and
an L2 penalty over the conv kernels,

    L = L_b + L_j + lambda * (1/2) sum(w^2).

BCE uses the overflow-free form max(y,0) - y*t + log(1 + exp(-|y|)).
The Jaccard distance is 1 - (I + s)/(U + s) with soft set sums
I = sum(y*t), U = sum(y) + sum(t) - I computed over every pixel of the
tensor passed in.

Evaluation accumulates a pixel confusion matrix and reports mean IoU
(diagonal over row-sum + col-sum - diagonal, averaged over classes) and
pixel accuracy (trace over total).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .ops import sigmoid
from .tensor import Parameter, Tensor


@dataclass
class LossConfig:
    l2_lambda: float = 1e-4       # weight-regularizer coefficient
    jaccard_smooth: float = 1.0   # added to numerator and denominator
    weight_cap: float = 2000.0    # maximum foreground B/F weight

    def __post_init__(self) -> None:
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.jaccard_smooth <= 0:
            raise ValueError("jaccard_smooth must be > 0")
        if self.weight_cap < 1:
            raise ValueError("weight_cap must be >= 1")


def _require_binary(t: np.ndarray, what: str) -> None:
    if not np.all((t == 0) | (t == 1)):
        raise ValueError(f"{what} must be binary (0/1)")


def bce_stable(
    logits: Tensor, targets: Tensor, weights: Tensor | None = None
) -> tuple[float, Tensor]:
    """Stabilized BCE, finite for |logit| up to 1e4 and beyond.

    Returns (loss, grad wrt logits). The loss is the mean over pixels;
    with weights it is the weighted mean sum(w*l)/sum(w), so all-ones
    weights reduce exactly to the plain mean. The gradient is
    (sigmoid(y) - t), weighted and normalized identically.
    """
    y = logits.data
    t = targets.data
    if y.shape != t.shape:
        raise ValueError(f"logits shape {y.shape} != targets shape {t.shape}")
    _require_binary(t, "targets")
    per_pixel = np.maximum(y, 0.0) - y * t + np.log1p(np.exp(-np.abs(y)))
    grad = sigmoid(y) - t
    if weights is None:
        loss = float(per_pixel.mean())
        grad = grad / y.size
    else:
        w = weights.data
        if w.shape != y.shape:
            raise ValueError(f"weights shape {w.shape} != logits shape {y.shape}")
        wsum = float(w.sum())
        loss = float((w * per_pixel).sum() / wsum)
        grad = grad * w / wsum
    return loss, Tensor(grad)


def jaccard_distance_loss(
    probs: Tensor, targets: Tensor, smooth: float = 1.0
) -> tuple[float, Tensor]:
    """Smoothed Jaccard distance 1 - (I+s)/(U+s) over all pixels.

    probs must already be probabilities; callers apply sigmoid first.
    Returns (loss, grad wrt probs).
    """
    y = probs.data
    t = targets.data
    if y.shape != t.shape:
        raise ValueError(f"probs shape {y.shape} != targets shape {t.shape}")
    if np.any(y < -1e-6) or np.any(y > 1.0 + 1e-6):
        raise ValueError("probs must lie in [0, 1]; apply sigmoid before this loss")
    _require_binary(t, "targets")
    if smooth <= 0:
        raise ValueError("smooth must be > 0")
    inter = float((y * t).sum())
    union = float(y.sum()) + float(t.sum()) - inter
    denom = union + smooth
    loss = 1.0 - (inter + smooth) / denom
    # quotient rule: dJ/dy = (t*(U+s) - (I+s)*(1-t)) / (U+s)^2
    grad = -(t * denom - (inter + smooth) * (1.0 - t)) / (denom * denom)
    return loss, Tensor(grad)


def combined_loss(
    logits: Tensor,
    targets: Tensor,
    params: Mapping[str, Parameter],
    cfg: LossConfig,
    weights: Tensor | None = None,
) -> tuple[float, Tensor]:
    """L_b + L_j + lambda*psi(W); returns (loss, grad wrt logits).

    The Jaccard gradient is chained through the sigmoid. The lambda
    term adds lambda*w onto each regularized parameter's grad buffer as
    a side effect, matching how the network's backward accumulates.
    """
    bce, grad_bce = bce_stable(logits, targets, weights)
    s = sigmoid(logits.data)
    jac, grad_jac = jaccard_distance_loss(Tensor(s), targets, cfg.jaccard_smooth)
    grad = grad_bce.data + grad_jac.data * s * (1.0 - s)
    total = bce + jac
    if cfg.l2_lambda > 0:
        reg = 0.0
        for p in params.values():
            if p.regularized:
                reg += float((p.value.astype(np.float64) ** 2).sum())
                p.add_grad(cfg.l2_lambda * p.value)
        total += 0.5 * cfg.l2_lambda * reg
    return total, Tensor(grad)


# ---------------------------------------------------------------------------
# confusion counts and metrics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionCounts:
    """Square pixel tally: counts[a, b] = pixels of true class a predicted b.

    Mergeable by addition, so parallel evaluation shards can be combined.
    """

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int = 2) -> "ConfusionCounts":
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.counts.shape != self.counts.shape:
            raise ValueError("cannot merge confusion counts of different class counts")
        return ConfusionCounts(self.counts + other.counts)


def accumulate_confusion(
    pred_mask: np.ndarray, gt_mask: np.ndarray, counts: ConfusionCounts
) -> ConfusionCounts:
    """Add one mask pair's pixel tallies into counts (in place)."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if pred.size == 0:
        return counts
    k = counts.num_classes
    pred = pred.astype(np.int64).ravel()
    gt = gt.astype(np.int64).ravel()
    if pred.min() < 0 or pred.max() >= k or gt.min() < 0 or gt.max() >= k:
        raise ValueError(f"class indices must lie in [0, {k})")
    flat = np.bincount(gt * k + pred, minlength=k * k)
    counts.counts += flat.reshape(k, k)
    return counts


def miou(counts: ConfusionCounts, zero_union: str = "exclude") -> float:
    """Mean over classes of p_ii / (row_sum + col_sum - p_ii).

    Classes whose union is zero have an undefined 0/0 IoU; by default
    they are excluded from the mean (zero_union may also be "one" or
    "zero" to count them as 1.0 or 0.0).
    """
    if counts.total == 0:
        raise ValueError("cannot compute mIOU of empty counts")
    if zero_union not in ("exclude", "one", "zero"):
        raise ValueError(f"unknown zero_union convention {zero_union!r}")
    c = counts.counts
    diag = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - diag
    ious = []
    for i in range(counts.num_classes):
        if union[i] == 0:
            if zero_union == "one":
                ious.append(1.0)
            elif zero_union == "zero":
                ious.append(0.0)
        else:
            ious.append(int(diag[i]) / int(union[i]))
    if not ious:
        raise ValueError("every class has zero union; mIOU undefined")
    return sum(ious) / len(ious)


def pixel_accuracy(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        raise ValueError("cannot compute pixel accuracy of empty counts")
    return float(np.trace(counts.counts)) / counts.total


# ---------------------------------------------------------------------------
# adaptive sample-wise weighting
# ---------------------------------------------------------------------------

def bf_ratio(mask: np.ndarray, cap: float = 2000.0) -> float:
    """Background/foreground pixel ratio of one binary patch.

    An all-background patch has no foreground to weight; its ratio is
    reported as the cap purely for bookkeeping.
    """
    m = np.asarray(mask)
    _require_binary(m, "mask")
    fg = int(np.count_nonzero(m))
    if fg == 0:
        return float(cap)
    return (m.size - fg) / fg


def make_weight_matrix(mask: np.ndarray, cap: float = 2000.0) -> np.ndarray:
    """Per-pixel weights: background 1.0, foreground min(B/F ratio, cap)."""
    m = np.asarray(mask)
    _require_binary(m, "mask")
    fg = int(np.count_nonzero(m))
    weights = np.ones(m.shape, dtype=np.float64)
    if fg == 0:
        return weights
    ratio = min((m.size - fg) / fg, float(cap))
    weights[m == 1] = max(ratio, 1.0)
    return weights
