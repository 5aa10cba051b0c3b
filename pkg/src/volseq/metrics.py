"""Confusion matrices, macro-averaged metrics and one-vs-rest ROC analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateClassError, LabelError, ShapeError


@dataclass
class ConfusionMatrix:
    """``counts[i, j]`` = samples of true class ``i`` predicted as ``j``."""

    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).astype(np.int64)

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn


def confusion(y_true, y_pred, k: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"{y_true.size} true labels but {y_pred.size} predictions")
    for name, y in (("true", y_true), ("predicted", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= k):
            raise LabelError(f"{name} labels must lie in [0, {k}); got range [{y.min()}, {y.max()}]")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def per_class(cm: ConfusionMatrix) -> dict[str, np.ndarray]:
    """Per-class accuracy ``(TP+TN)/total``, precision and recall."""
    total = np.full(cm.k, cm.total)
    return {
        "accuracy": _ratio(cm.tp + cm.tn, total),
        "precision": _ratio(cm.tp, cm.tp + cm.fp),
        "recall": _ratio(cm.tp, cm.tp + cm.fn),
    }


def literal_class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    """``TP / (TP + TN)`` per class.

    Kept for comparison only; it is not a rate over any population of
    samples, so :func:`macro_summary` reports ``(TP+TN)/total`` instead.
    """
    return _ratio(cm.tp, cm.tp + cm.tn)


def harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def macro_summary(cm: ConfusionMatrix) -> dict[str, float]:
    """MAAccuracy, MAPrecision, MARecall and MAF1 (harmonic mean of the macro P and R)."""
    pc = per_class(cm)
    p = float(pc["precision"].mean())
    r = float(pc["recall"].mean())
    return {
        "MAAccuracy": float(pc["accuracy"].mean()),
        "MAPrecision": p,
        "MARecall": r,
        "MAF1": harmonic(p, r),
    }


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_ovr(y_true, scores, k: int) -> RocCurve:
    """ROC curve of class ``k`` against the rest, scored by column ``k``.

    The threshold sweeps the distinct score values from high to low; tied
    samples move together, so the trapezoidal area equals the Mann-Whitney
    statistic with ties counted one half.
    """
    y_true = np.asarray(y_true).ravel()
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != y_true.size:
        raise ShapeError(f"scores {scores.shape} do not match {y_true.size} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    s = scores[:, k]
    pos = y_true == k
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(f"class {k} has {n_pos} positive and {n_neg} negative samples")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, pos_sorted = s[order], pos[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tps = np.cumsum(pos_sorted)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s_sorted[ends]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


def ovr_aucs(y_true, scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return np.array([roc_ovr(y_true, scores, k).auc for k in range(scores.shape[1])])


def macro_ovr_auc(y_true, scores) -> float:
    """Unweighted mean of the per-class one-vs-rest AUCs."""
    return float(ovr_aucs(y_true, scores).mean())


# -- report emitters ----------------------------------------------------------


def format_key_values(values: dict) -> str:
    lines = []
    for key, val in values.items():
        if isinstance(val, float):
            lines.append(f"{key}={val:.6f}")
        else:
            lines.append(f"{key}={val}")
    return "\n".join(lines)


def write_table(path, header, rows) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_roc_points(curve: RocCurve, path) -> None:
    """Two-column ``fpr tpr`` point file."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("# fpr\ttpr\n")
        for f, t in zip(curve.fpr, curve.tpr):
            fh.write(f"{f:.10g}\t{t:.10g}\n")
