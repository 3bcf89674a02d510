"""Accuracy, detection counts, ROC/AUC, smoothing and sensitivity sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nn import forward


class UndefinedROCError(ValueError):
    pass


def accuracy(model, features, labels) -> float:
    """Fraction of argmax hits; ties go to the lowest class index."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy needs at least one sample")
    pred = np.argmax(forward(model, features), axis=1)
    return float(np.mean(pred == labels))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def tpr(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else 1.0

    @property
    def fpr(self) -> float:
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0


def _aligned(flags, truth):
    flags = np.asarray(flags, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if flags.shape != truth.shape:
        raise ValueError(f"length mismatch: {flags.shape} vs {truth.shape}")
    return flags, truth


def confusion_counts(flags, truth) -> ConfusionCounts:
    flags, truth = _aligned(flags, truth)
    return ConfusionCounts(tp=int(np.sum(flags & truth)), fp=int(np.sum(flags & ~truth)),
                           tn=int(np.sum(~flags & ~truth)), fn=int(np.sum(~flags & truth)))


def detection_rate(flags, truth) -> float:
    """True-positive rate of flagging; 1.0 when nothing malicious exists."""
    return confusion_counts(flags, truth).tpr


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-D sequences")
    if labels.all() or not labels.any():
        raise UndefinedROCError("ROC needs at least one positive and one negative label")
    return scores, labels


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep over distinct scores (descending), trapezoidal area.

    Equal scores form one threshold step, so ties contribute a diagonal segment.
    """
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last position of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tps / y.sum()]
    fpr = np.r_[0.0, fps / (~y).sum()]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


def auc_pair_oracle(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties counting half."""
    scores, labels = _check_binary(scores, labels)
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return float(wins / (pos.size * neg.size))


def moving_average(series: Sequence[float], window: int = 5) -> list[float]:
    """Centred mean; the window shrinks at the edges so the length is preserved."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    left, right = (window - 1) // 2, window // 2
    csum = np.r_[0.0, np.cumsum(x)]
    out = []
    for i in range(n):
        lo, hi = max(0, i - left), min(n, i + right + 1)
        out.append(float((csum[hi] - csum[lo]) / (hi - lo)) if window > 1 else float(x[i]))
    return out


SWEEP_COLUMNS = ("final_accuracy", "poisoned_eval_accuracy", "total_anomalies",
                 "rounds_with_anomalies", "mean_grad_score", "mean_recon_score")


@dataclass
class SweepResult:
    sf_grid: list
    rows: list = field(default_factory=list)
    raw: list = field(default_factory=list)

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]


def sweep_sensitivity(run: Callable[[float, int], dict], sf_grid: Sequence[float],
                      seeds: Sequence[int]) -> SweepResult:
    """Call ``run(sf, seed)`` for every grid point and seed; average per sf.

    ``run`` returns a summary mapping holding at least :data:`SWEEP_COLUMNS`.
    """
    if len(sf_grid) == 0:
        raise ValueError("sf_grid must not be empty")
    if len(seeds) == 0:
        raise ValueError("need at least one seed")
    result = SweepResult(list(sf_grid))
    for sf in sf_grid:
        per_seed = []
        for seed in seeds:
            summary = run(sf, seed)
            row = {"sf": sf, "seed": seed, **{c: summary[c] for c in SWEEP_COLUMNS}}
            per_seed.append(row)
            result.raw.append(row)
        avg = {"sf": sf, "n_seeds": len(seeds)}
        for c in SWEEP_COLUMNS:
            avg[c] = float(np.mean([r[c] for r in per_seed]))
        result.rows.append(avg)
    return result
