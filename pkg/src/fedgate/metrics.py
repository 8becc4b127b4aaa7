"""Accuracy and ROC AUC for binary scores."""

from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0:
        raise UndefinedMetricError("metrics need at least one sample")
    if scores.shape != labels.shape:
        raise UndefinedMetricError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise UndefinedMetricError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def accuracy(scores, labels, threshold=0.5):
    """Fraction of samples where (score >= threshold) equals the label."""
    scores, labels = _check(scores, labels)
    return float(np.mean((scores >= threshold).astype(np.int64) == labels))


def roc_curve(scores, labels):
    """ROC points from a sweep over unique score thresholds, (0,0) through (1,1)."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    fpr = np.r_[0, fps / n_neg]
    tpr = np.r_[0, tps / n_pos]
    return fpr, tpr


def roc_auc(scores, labels):
    """(roc_points, auc) with AUC by the trapezoidal rule over the ROC points."""
    fpr, tpr = roc_curve(scores, labels)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


@dataclass
class EvalReport:
    n: int
    accuracy: float
    auc: float
    loss: float
    roc_points: list = field(default_factory=list)

    def to_text(self):
        return f"n={self.n}\naccuracy={self.accuracy!r}\nauc={self.auc!r}\nloss={self.loss!r}\n"

    def roc_csv(self):
        return "fpr,tpr\n" + "".join(f"{f!r},{t!r}\n" for f, t in self.roc_points)


def evaluate_scores(scores, labels, threshold=0.5):
    scores, labels = _check(scores, labels)
    eps = 1e-12
    p = np.clip(scores, eps, 1 - eps)
    loss = float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))
    try:
        points, auc = roc_auc(scores, labels)
    except UndefinedMetricError:
        points, auc = [], float("nan")
    return EvalReport(labels.size, accuracy(scores, labels, threshold), auc, loss, points)
