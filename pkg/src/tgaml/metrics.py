"""Thresholded classification metrics and ROC analysis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ContractError, DataError


class MetricError(DataError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: float
    fp: float
    tn: float
    fn: float

    @property
    def total(self) -> float:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ScalarMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    auc: float
    threshold: float
    balanced: ScalarMetrics | None = None
    best_f1_threshold: float | None = None
    confusion: ConfusionMatrix | None = None
    roc_points: list[tuple[float, float]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("accuracy", "precision", "recall", "f1", "mcc", "auc", "threshold", "best_f1_threshold")}
        d["confusion"] = asdict(self.confusion) if self.confusion else None
        d["balanced"] = asdict(self.balanced) if self.balanced else None
        return d


def _check(p, y) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y).ravel().astype(bool)
    if p.shape != y.shape:
        raise ContractError(f"{p.size} scores but {y.size} labels")
    return p, y


def confusion(probabilities, labels, threshold: float = 0.5) -> ConfusionMatrix:
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold must lie in [0, 1], got {threshold}")
    p, y = _check(probabilities, labels)
    pred = p >= threshold
    return ConfusionMatrix(
        tp=int(np.sum(pred & y)), fp=int(np.sum(pred & ~y)),
        tn=int(np.sum(~pred & ~y)), fn=int(np.sum(~pred & y)),
    )


def _ratio(a: float, b: float) -> float:
    return a / b if b > 0 else 0.0


def scalar_metrics(cm: ConfusionMatrix) -> ScalarMetrics:
    if cm.total <= 0:
        raise MetricError("empty confusion matrix")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    den = math.sqrt((cm.tp + cm.fp) * (cm.tp + cm.fn) * (cm.tn + cm.fp) * (cm.tn + cm.fn))
    return ScalarMetrics(
        accuracy=(cm.tp + cm.tn) / cm.total,
        precision=precision,
        recall=recall,
        f1=_ratio(2 * precision * recall, precision + recall),
        mcc=_ratio(cm.tp * cm.tn - cm.fp * cm.fn, den),
    )


def balanced_metrics(cm: ConfusionMatrix) -> ScalarMetrics:
    """Metrics after reweighting so each class carries half the total mass."""
    pos, neg = cm.tp + cm.fn, cm.tn + cm.fp
    if pos == 0 or neg == 0:
        raise MetricError("balanced metrics need both classes")
    n = cm.total
    w1, w0 = 0.5 * n / pos, 0.5 * n / neg
    return scalar_metrics(ConfusionMatrix(cm.tp * w1, cm.fp * w0, cm.tn * w0, cm.fn * w1))


def roc_curve(probabilities, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(fpr, tpr, thresholds)`` sweeping every distinct score, highest first.

    The first point is (0, 0) at threshold +inf.
    """
    p, y = _check(probabilities, labels)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise MetricError("ROC needs both classes present")
    order = np.argsort(-p, kind="mergesort")
    p, y = p[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(p) != 0), len(p) - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    fpr = np.r_[0.0, fps / neg]
    tpr = np.r_[0.0, tps / pos]
    thresholds = np.r_[np.inf, p[last]]
    return fpr, tpr, thresholds


def roc_auc(probabilities, labels) -> tuple[list[tuple[float, float]], float]:
    fpr, tpr, _ = roc_curve(probabilities, labels)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def best_f1_threshold(probabilities, labels) -> float:
    """Score threshold maximising F1 (ties resolved towards the higher threshold)."""
    fpr, tpr, thr = roc_curve(probabilities, labels)
    _, y = _check(probabilities, labels)
    pos, neg = y.sum(), (~y).sum()
    tp, fp = tpr[1:] * pos, fpr[1:] * neg
    f1 = 2 * tp / (2 * tp + fp + (pos - tp))
    return float(thr[1:][int(np.argmax(f1))])


def evaluate(probabilities, labels, threshold: float = 0.5,
             tune_threshold: bool = True) -> MetricsReport:
    p, y = _check(probabilities, labels)
    cm = confusion(p, y, threshold)
    raw = scalar_metrics(cm)
    try:
        points, auc = roc_auc(p, y)
        balanced = balanced_metrics(cm)
    except MetricError:
        points, auc, balanced = [], float("nan"), None
    return MetricsReport(
        **asdict(raw), auc=auc, threshold=threshold, balanced=balanced,
        best_f1_threshold=best_f1_threshold(p, y) if tune_threshold and points else None,
        confusion=cm, roc_points=points,
    )


def write_metrics_json(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_roc_csv(probabilities, labels, path: str | Path) -> None:
    fpr, tpr, thr = roc_curve(probabilities, labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, r in zip(thr, fpr, tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(r))])
