"""Classification and regression metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def confusion_matrix(preds, targets, num_classes: int | None = None) -> np.ndarray:
    """Counts ``C[t, p]`` of samples with true class t predicted as p."""
    preds = np.asarray(preds, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets must have the same length")
    if num_classes is None:
        num_classes = int(max(preds.max(initial=-1), targets.max(initial=-1))) + 1
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (targets, preds), 1)
    return cm


def binary_confusion(tp: int, fn: int, tn: int, fp: int) -> np.ndarray:
    """2x2 confusion matrix with class 1 as the positive class."""
    return np.array([[tn, fp], [fn, tp]], dtype=np.int64)


def balanced_accuracy(confusion) -> float:
    """Mean recall over classes that have at least one true sample.

    In the binary case this is the mean of sensitivity and specificity.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        raise ValueError("balanced accuracy is undefined without samples")
    recall = np.diag(cm)[present] / support[present]
    return float(recall.mean())


def macro_f1(preds, targets, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1; a class with 0/0 precision or recall scores 0."""
    cm = confusion_matrix(preds, targets, num_classes).astype(np.float64)
    if cm.sum() == 0:
        raise ValueError("macro-F1 is undefined without samples")
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def rmse(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("rmse needs two nonempty arrays of equal shape")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def pearson_r(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size < 2:
        raise ValueError("pearson_r needs two arrays of equal shape with at least 2 entries")
    pc, tc = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(np.sum(pc * pc)), np.sqrt(np.sum(tc * tc))
    if sp == 0 or st == 0:
        raise ValueError("pearson_r is undefined for zero-variance input")
    return float(np.sum(pc * tc) / (sp * st))


@dataclass
class MetricsReport:
    loss: float | None = None
    accuracy: float | None = None
    balanced_accuracy: float | None = None
    macro_f1: float | None = None
    rmse: float | None = None
    pearson_r: float | None = None
    confusion: list | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in self.to_dict().items())


def classification_report(preds, targets, num_classes: int, loss: float | None = None) -> MetricsReport:
    cm = confusion_matrix(preds, targets, num_classes)
    return MetricsReport(
        loss=loss,
        accuracy=float(np.trace(cm) / cm.sum()),
        balanced_accuracy=balanced_accuracy(cm),
        macro_f1=macro_f1(preds, targets, num_classes),
        confusion=cm.tolist(),
    )


def regression_report(preds, targets, loss: float | None = None) -> MetricsReport:
    try:
        r = pearson_r(preds, targets)
    except ValueError:
        r = None
    return MetricsReport(loss=loss, rmse=rmse(preds, targets), pearson_r=r)
