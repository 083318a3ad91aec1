"""Evaluation metrics for binary conversion predictions.

All metrics operate on an EvalSet (predictions in [0, 1], labels in {0, 1})
and are exact, deterministic functions of their input:

  auc      rank-sum formulation, tied predictions count half
  logloss  cross entropy with predictions clamped away from {0, 1}
  pcoc     predicted-over-observed conversion ratio, sum(p) / sum(y)
  ece      expected calibration error over equal-count prediction buckets

ece sorts by prediction (stable), splits into k buckets of near-equal count
(the remainder goes to the first buckets, so tied borderline samples land in
the lower bucket), and averages |mean prediction - mean label| weighted by
bucket size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOGLOSS_EPS = 1e-12
DEFAULT_ECE_BUCKETS = 100


@dataclass(frozen=True)
class EvalSet:
    """Aligned predictions and binary labels for one evaluation slice."""

    predictions: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.predictions, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if p.ndim != 1 or y.ndim != 1 or p.shape != y.shape:
            raise ValueError("predictions and labels must be 1-D and aligned")
        if p.size < 1:
            raise ValueError("empty evaluation set")
        if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
            raise ValueError("predictions outside [0, 1]")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "predictions", p)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.predictions.size

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average of their rank range."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    # boundaries of runs of equal values, in sorted position space
    edges = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1], True])
    starts, ends = edges[:-1], edges[1:]
    avg = 0.5 * (starts + ends + 1.0)  # mean of ranks start+1 .. end
    ranks = np.empty(values.size, dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(ev: EvalSet) -> float:
    """Probability a random positive outranks a random negative, ties at 1/2."""
    n_pos = ev.n_pos
    n_neg = ev.n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = _average_ranks(ev.predictions)
    pos_rank_sum = float(ranks[ev.labels == 1.0].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def logloss(ev: EvalSet, eps: float = LOGLOSS_EPS) -> float:
    p = np.clip(ev.predictions, eps, 1.0 - eps)
    y = ev.labels
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def pcoc(ev: EvalSet) -> float:
    """Calibration ratio sum(predicted) / sum(observed); 1.0 is perfect."""
    total_pos = ev.labels.sum()
    if total_pos == 0:
        raise ValueError("pcoc undefined without positives")
    return float(ev.predictions.sum() / total_pos)


def _bucket_slices(n: int, k: int) -> list[tuple[int, int]]:
    """Equal-count split of n sorted samples into k buckets.

    The remainder r = n mod k goes to the first r buckets, one extra sample
    each, so bucket sizes never differ by more than one.
    """
    base, extra = divmod(n, k)
    slices = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        slices.append((start, start + size))
        start += size
    return slices


def ece(ev: EvalSet, k: int = DEFAULT_ECE_BUCKETS) -> float:
    if not 1 <= k <= ev.n:
        raise ValueError("bucket count out of range")
    order = np.argsort(ev.predictions, kind="stable")
    p = ev.predictions[order]
    y = ev.labels[order]
    total = 0.0
    for a, b in _bucket_slices(ev.n, k):
        total += abs(float(p[a:b].sum() - y[a:b].sum()))
    return total / ev.n


@dataclass(frozen=True)
class BucketRow:
    """One equal-count calibration bucket: size, mean prediction, mean label."""

    count: int
    mean_pred: float
    mean_label: float

    @property
    def gap(self) -> float:
        return abs(self.mean_pred - self.mean_label)


@dataclass(frozen=True)
class MetricsReport:
    n: int
    n_pos: int
    auc: float
    logloss: float
    pcoc: float
    ece: float
    ece_buckets: int
    bucket_table: tuple[BucketRow, ...] = field(repr=False, default=())


def evaluate(ev: EvalSet, k: int = DEFAULT_ECE_BUCKETS) -> MetricsReport:
    """All four metrics plus the per-bucket calibration table."""
    if not 1 <= k <= ev.n:
        raise ValueError("bucket count out of range")
    order = np.argsort(ev.predictions, kind="stable")
    p = ev.predictions[order]
    y = ev.labels[order]
    rows = []
    gap_sum = 0.0
    for a, b in _bucket_slices(ev.n, k):
        ps, ys = float(p[a:b].sum()), float(y[a:b].sum())
        count = b - a
        rows.append(BucketRow(count=count, mean_pred=ps / count, mean_label=ys / count))
        gap_sum += abs(ps - ys)
    return MetricsReport(
        n=ev.n,
        n_pos=ev.n_pos,
        auc=auc(ev),
        logloss=logloss(ev),
        pcoc=pcoc(ev),
        ece=gap_sum / ev.n,
        ece_buckets=k,
        bucket_table=tuple(rows),
    )
