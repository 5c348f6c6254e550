"""Micro-F1, per-trial averaged F1 and one-vs-rest micro PR-AUC."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .datamodel import LABEL_INDEX, LABELS


@dataclass
class MetricsReport:
    micro_f1: float
    averaged_f1: float
    pr_auc: float
    accuracy: float
    precision: Dict[str, float]
    recall: Dict[str, float]
    confusion: List[List[int]]   # rows = gold, columns = predicted
    support: Dict[str, int]
    n: int

    def to_dict(self):
        return asdict(self)


def confusion_matrix(gold: Sequence[int], pred: Sequence[int], k: int = 3) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(gold, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def micro_f1(cm: np.ndarray) -> float:
    """F1 from TP/FP/FN pooled over classes."""
    tp = np.trace(cm)
    fp = cm.sum(axis=0).sum() - tp
    fn = cm.sum(axis=1).sum() - tp
    if tp == 0:
        return 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    if p == r:
        # single-label case: the harmonic mean is p, and 2pp/(p+p) can be off by an ulp
        return float(p)
    return float(2 * p * r / (p + r))


def accuracy(gold: Sequence, pred: Sequence) -> float:
    if len(gold) == 0:
        return 0.0
    return sum(g == p for g, p in zip(gold, pred)) / len(gold)


def pr_curve(labels: Sequence[int], scores: Sequence[float]):
    """(recall, precision) points for every distinct threshold, highest first,
    preceded by the (0, 1) anchor. Positive means ``score >= threshold``."""
    y = np.asarray(labels, dtype=float)
    s = np.asarray(scores, dtype=float)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    n_pos = y.sum()
    recall = np.r_[0.0, tp / n_pos] if n_pos else np.r_[0.0, np.zeros_like(tp)]
    precision = np.r_[1.0, tp / (tp + fp)]
    return recall, precision


def pr_auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Trapezoidal area under :func:`pr_curve`; 0 when there are no positives."""
    if not np.any(np.asarray(labels)):
        return 0.0
    recall, precision = pr_curve(labels, scores)
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))


def micro_pr_auc(gold: Sequence[int], probs: np.ndarray) -> float:
    """One-vs-rest over all classes pooled into a single binary problem."""
    probs = np.asarray(probs, dtype=float)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(gold)), np.asarray(gold, dtype=int)] = 1.0
    return pr_auc(onehot.ravel(), probs.ravel())


def evaluate(predictions: Sequence[str], gold: Sequence[str], probs: Optional[np.ndarray] = None,
             groups: Optional[Sequence[str]] = None) -> MetricsReport:
    """Metrics for aligned label lists.

    ``probs`` (n x 3) feeds PR-AUC; without it the one-hot of the predictions is
    used. ``groups`` (e.g. trial ids) defines the averaged F1 as the mean of
    per-group micro-F1; without groups it equals micro-F1.
    """
    if len(predictions) != len(gold):
        raise ValueError(f"{len(predictions)} predictions for {len(gold)} gold labels")
    if groups is not None and len(groups) != len(gold):
        raise ValueError("groups must align with gold labels")
    g = [LABEL_INDEX[x] for x in gold]
    p = [LABEL_INDEX[x] for x in predictions]
    cm = confusion_matrix(g, p)
    f1 = micro_f1(cm)
    if groups is None:
        avg = f1
    else:
        per = {}
        for grp, gi, pi in zip(groups, g, p):
            per.setdefault(grp, ([], []))
            per[grp][0].append(gi)
            per[grp][1].append(pi)
        avg = float(np.mean([micro_f1(confusion_matrix(a, b)) for a, b in per.values()]))
    if probs is None:
        probs = np.eye(3)[p] if p else np.zeros((0, 3))
    auc = micro_pr_auc(g, probs) if g else 0.0
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    precision = {LABELS[k]: float(cm[k, k] / col[k]) if col[k] else 0.0 for k in range(3)}
    recall = {LABELS[k]: float(cm[k, k] / row[k]) if row[k] else 0.0 for k in range(3)}
    return MetricsReport(f1, avg, auc, accuracy(g, p), precision, recall, cm.tolist(),
                         {LABELS[k]: int(row[k]) for k in range(3)}, len(g))
