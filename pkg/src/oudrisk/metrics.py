"""Classification metrics: confusion counts, precision/recall/F1, AUROC and ROC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class PRF1:
    precision: float
    recall: float
    f1: float
    undefined: tuple = ()  # names of metrics that were 0/0 and reported as 0


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0:
        raise ValueError("empty input")
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.size} scores, {labels.size} labels")
    return scores, labels.astype(bool)


def confusion(scores, labels, threshold: float = 0.5) -> Counts:
    """Counts with ``score >= threshold`` called positive."""
    scores, labels = _check(scores, labels)
    called = scores >= threshold
    return Counts(tp=int(np.sum(called & labels)), fp=int(np.sum(called & ~labels)),
                  tn=int(np.sum(~called & ~labels)), fn=int(np.sum(~called & labels)))


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def prf1(counts: Counts) -> PRF1:
    precision, u_p = _ratio(counts.tp, counts.tp + counts.fp)
    recall, u_r = _ratio(counts.tp, counts.tp + counts.fn)
    f1, u_f = f1_from(precision, recall)
    undefined = tuple(n for n, u in (("precision", u_p), ("recall", u_r), ("f1", u_f)) if u)
    return PRF1(precision, recall, f1, undefined)


def f1_from(precision: float, recall: float) -> tuple[float, bool]:
    """Harmonic mean; (0, True) when both are zero."""
    s = precision + recall
    if s == 0:
        return 0.0, True
    return 2 * precision * recall / s, False


def f1_score(scores, labels, threshold: float = 0.5) -> float:
    return prf1(confusion(scores, labels, threshold)).f1


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from average ranks; ties count one half."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> np.ndarray:
    """(fpr, tpr) points, one per distinct threshold, from (0, 0) to (1, 1)."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # end of each tie group
    fpr = np.r_[0, fps[last]] / n_neg
    tpr = np.r_[0, tps[last]] / n_pos
    return np.column_stack([fpr, tpr])


def trapezoid_area(curve) -> float:
    curve = np.asarray(curve)
    return float(_trapezoid(curve[:, 1], curve[:, 0]))
