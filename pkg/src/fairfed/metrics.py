"""Accuracy and group-fairness metrics at global and per-client scope.

Metrics are computed from a :class:`GroupCensus`, the exact count of every
``(A, Y, Y_hat)`` triple over a row set. A metric whose conditioning event
has no rows is undefined and returned as ``None`` (never NaN).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linear_model import ModelParams, predict

METRICS = ("eod", "spd")


@dataclass
class GroupCensus:
    """Counts indexed ``[a, y, y_hat]``."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (2, 2, 2):
            raise ValueError("census counts must have shape (2, 2, 2)")
        if np.any(self.counts < 0):
            raise ValueError("census counts must be non-negative")

    @classmethod
    def empty(cls) -> "GroupCensus":
        return cls(np.zeros((2, 2, 2), dtype=np.int64))

    @classmethod
    def from_predictions(cls, y, sensitive, y_hat) -> "GroupCensus":
        counts = np.zeros((2, 2, 2), dtype=np.int64)
        np.add.at(counts, (np.asarray(sensitive), np.asarray(y), np.asarray(y_hat)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def cell_counts(self) -> np.ndarray:
        """2x2 ``[a, y]`` counts, predictions marginalized out."""
        return self.counts.sum(axis=2)

    def __add__(self, other: "GroupCensus") -> "GroupCensus":
        return GroupCensus(self.counts + other.counts)


def census(theta: ModelParams, X, y, sensitive) -> GroupCensus:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return GroupCensus.empty()
    return GroupCensus.from_predictions(y, sensitive, predict(theta, X))


def _rate(hits, total) -> Optional[float]:
    return None if total == 0 else hits / total


def true_positive_rate(c: GroupCensus, a: int) -> Optional[float]:
    return _rate(c.counts[a, 1, 1], c.counts[a, 1].sum())


def positive_rate(c: GroupCensus, a: int) -> Optional[float]:
    return _rate(c.counts[a, :, 1].sum(), c.counts[a].sum())


def eod(c: GroupCensus) -> Optional[float]:
    """TPR(A=0) - TPR(A=1); ``None`` if either group has no positive labels."""
    t0, t1 = true_positive_rate(c, 0), true_positive_rate(c, 1)
    if t0 is None or t1 is None:
        return None
    return float(t0 - t1)


def spd(c: GroupCensus) -> Optional[float]:
    """P(Y_hat=1 | A=0) - P(Y_hat=1 | A=1); ``None`` if either group is empty."""
    r0, r1 = positive_rate(c, 0), positive_rate(c, 1)
    if r0 is None or r1 is None:
        return None
    return float(r0 - r1)


def fairness(c: GroupCensus, kind: str) -> Optional[float]:
    if kind == "eod":
        return eod(c)
    if kind == "spd":
        return spd(c)
    raise ValueError(f"metric must be one of {METRICS}, got {kind!r}")


def accuracy(c: GroupCensus) -> float:
    if c.total == 0:
        raise ValueError("accuracy of an empty census is undefined")
    correct = c.counts[:, 0, 0].sum() + c.counts[:, 1, 1].sum()
    return float(correct / c.total)


@dataclass(frozen=True)
class DatasetStats:
    """Pooled statistics every client needs to compute its metric component.

    For ``eod``: ``p0 = P(A=0, Y=1)`` and ``p1 = P(A=1, Y=1)``.
    For ``spd``: ``p0 = P(A=0)`` and ``p1 = P(A=1)``.
    ``n`` is the pooled row count.
    """

    kind: str
    p0: float
    p1: float
    n: int

    def __post_init__(self):
        if self.kind not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.kind!r}")
        if not (0.0 <= self.p0 <= 1.0 and 0.0 <= self.p1 <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.n <= 0:
            raise ValueError("pooled row count must be positive")

    @classmethod
    def from_counts(cls, kind: str, count0: float, count1: float, n: float) -> "DatasetStats":
        return cls(kind, float(count0) / float(n), float(count1) / float(n), int(round(n)))

    @classmethod
    def from_census(cls, kind: str, cells: np.ndarray) -> "DatasetStats":
        """From 2x2 ``[a, y]`` counts of the pooled data."""
        cells = np.asarray(cells)
        n = cells.sum()
        if kind == "eod":
            return cls.from_counts(kind, cells[0, 1], cells[1, 1], n)
        return cls.from_counts(kind, cells[0].sum(), cells[1].sum(), n)


class DegenerateStatsError(ValueError):
    """A pooled denominator is zero, so the global metric cannot be formed."""


def m_global_component(c: GroupCensus, stats: DatasetStats, n_k=None, n=None) -> float:
    """This client's additive share of the pooled EOD or SPD.

    Summing the component over all clients reproduces the centralized
    metric. A client with no rows in a conditioning cell contributes zero
    for that term, since the cell's local frequency multiplies the
    undefined conditional rate.
    """
    if stats.p0 <= 0 or stats.p1 <= 0:
        raise DegenerateStatsError(f"zero pooled denominator in {stats}")
    n_k = c.total if n_k is None else n_k
    n = stats.n if n is None else n
    if n_k == 0:
        return 0.0
    if n_k > n:
        raise ValueError("client row count exceeds pooled row count")
    terms = []
    for a, pooled in ((0, stats.p0), (1, stats.p1)):
        if stats.kind == "eod":
            cond_rows = c.counts[a, 1].sum()
            hits = c.counts[a, 1, 1]
        else:
            cond_rows = c.counts[a].sum()
            hits = c.counts[a, :, 1].sum()
        rate = hits / cond_rows if cond_rows else 0.0
        local_share = cond_rows / n_k
        terms.append(rate * local_share / pooled)
    return float((n_k / n) * (terms[0] - terms[1]))


@dataclass
class LocalMetrics:
    fairness: Optional[float]
    accuracy: float
    n_k: int
    m_global: float
    accuracy_share: float

    @property
    def defined(self) -> bool:
        return self.fairness is not None


def local_metrics(c: GroupCensus, stats: DatasetStats) -> LocalMetrics:
    acc = accuracy(c)
    return LocalMetrics(
        fairness=fairness(c, stats.kind),
        accuracy=acc,
        n_k=c.total,
        m_global=m_global_component(c, stats),
        accuracy_share=acc * c.total / stats.n,
    )


def std_acc(accuracies) -> float:
    """Population standard deviation of per-client accuracies (unweighted)."""
    accs = np.asarray(accuracies, dtype=np.float64)
    if accs.size == 0:
        raise ValueError("need at least one client accuracy")
    if np.all(accs == accs[0]):
        return 0.0  # np.std leaves rounding residue for equal values
    return float(accs.std())
