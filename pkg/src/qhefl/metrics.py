"""ROC curves, AUC and confusion matrices."""

from __future__ import annotations

import numpy as np

from .errors import InputError, UndefinedMetric


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) for binary labels, one point per distinct score.

    Tied scores move the curve diagonally.  The curve starts at (0, 0) with an
    infinite threshold and ends at (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise InputError("scores and labels must be equal-length vectors")
    if not np.all(np.isfinite(s)):
        raise InputError("scores must be finite")
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetric("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return np.r_[0.0, fp / neg], np.r_[0.0, tp / pos], np.r_[np.inf, s[last]]


def auc(fpr, tpr) -> float:
    """Trapezoidal area under a curve given by monotone x."""
    x = np.asarray(fpr, dtype=np.float64)
    y = np.asarray(tpr, dtype=np.float64)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def roc_auc(scores, labels) -> float:
    return auc(*roc_points(scores, labels)[:2])


def _one_hot(labels, n_classes):
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise InputError("labels out of range")
    return np.eye(n_classes, dtype=bool)[y]


def micro_macro_auc(scores, labels) -> tuple[float, float]:
    """Micro AUC pools every one-vs-rest decision; macro averages per-class AUCs.

    ``scores`` has shape (N, C) with one column per class.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise InputError("scores must be (samples, classes)")
    onehot = _one_hot(labels, s.shape[1])
    micro = roc_auc(s.ravel(), onehot.ravel())
    per_class = [roc_auc(s[:, c], onehot[:, c]) for c in range(s.shape[1])]
    return micro, float(np.mean(per_class))


def roc_curves(scores, labels) -> dict:
    """Per-class plus micro and macro ROC curves, keyed by class index / name.

    The macro curve averages per-class TPR on the union of FPR points.
    """
    s = np.asarray(scores, dtype=np.float64)
    onehot = _one_hot(labels, s.shape[1])
    curves = {c: roc_points(s[:, c], onehot[:, c])[:2] for c in range(s.shape[1])}
    curves["micro"] = roc_points(s.ravel(), onehot.ravel())[:2]
    grid = np.unique(np.concatenate([f for f, _ in (curves[c] for c in range(s.shape[1]))]))
    curves["macro"] = (grid, np.mean([np.interp(grid, *curves[c]) for c in range(s.shape[1])], axis=0))
    return curves


def confusion_matrix(preds, labels, n_classes: int | None = None, normalize: bool = False) -> np.ndarray:
    """Rows are true classes, columns predictions; optionally row-normalised."""
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise InputError("preds and labels differ in length")
    k = n_classes if n_classes is not None else int(max(p.max(initial=0), y.max(initial=0)) + 1)
    if p.size and (min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= k):
        raise InputError("class index out of range")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (y, p), 1)
    if not normalize:
        return m
    rows = m.sum(axis=1, keepdims=True)
    return np.divide(m, rows, out=np.zeros((k, k)), where=rows > 0)
