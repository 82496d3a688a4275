"""Client-side bias mitigation: reweighing and a FairBatch-style sampler.

Every strategy reduces to per-row loss weights for local training, so the
aggregation logic never needs to know which strategy a client runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._rng import derive_rng
from ._validation import check_binary
from .metrics import GroupCensus, fairness

logger = logging.getLogger(__name__)

STRATEGIES = ("none", "local-reweigh", "global-reweigh", "fairbatch")
FAIRBATCH_FLOOR = 1e-3


def reweigh_table(cells) -> np.ndarray:
    """Reweighing factors ``P(A=a) P(Y=y) / P(A=a, Y=y)`` as a 2x2 ``[a, y]`` table.

    Cells with no rows get weight 1.
    """
    cells = np.asarray(cells, dtype=np.float64)
    if cells.shape != (2, 2):
        raise ValueError("expected 2x2 [a, y] counts")
    n = cells.sum()
    if n <= 0:
        raise ValueError("reweighing needs at least one row")
    p_a = cells.sum(axis=1) / n
    p_y = cells.sum(axis=0) / n
    table = np.ones((2, 2))
    for a in (0, 1):
        for y in (0, 1):
            if cells[a, y] > 0:
                table[a, y] = p_a[a] * p_y[y] / (cells[a, y] / n)
    return table


def global_reweigh_table(client_cells, secure_sum=None) -> np.ndarray:
    """One reweighing table from the pooled counts of every client.

    ``secure_sum`` maps a list of per-client vectors to their sum; pass the
    aggregator's method so that only the pooled counts are revealed.
    Without it the counts are summed in the clear.
    """
    vectors = [np.asarray(c, dtype=np.float64).reshape(4) for c in client_cells]
    pooled = secure_sum(vectors) if secure_sum is not None else np.sum(vectors, axis=0)
    pooled = np.rint(np.asarray(pooled)).reshape(2, 2)
    if np.any(pooled.sum(axis=1) == 0):
        raise ValueError("a sensitive group is absent from the pooled data")
    return reweigh_table(pooled)


def row_weights(table: np.ndarray, y, sensitive) -> np.ndarray:
    return np.asarray(table)[np.asarray(sensitive), np.asarray(y)]


def fairbatch_weights(prev, c: GroupCensus, step: float, metric: str = "eod") -> np.ndarray:
    """Shift ``step`` of sampling mass toward the disadvantaged positive cell.

    ``prev`` is a 2x2 ``[a, y]`` sampling distribution. When the local
    metric of the current model is negative the ``(A=0, Y=1)`` cell gains
    mass taken from ``(A=1, Y=1)``; when positive, the reverse. Occupied
    cells are floored at 1e-3 and the result renormalized. An undefined
    metric, or a missing source or target cell, leaves ``prev`` unchanged.
    """
    prev = np.asarray(prev, dtype=np.float64)
    disparity = fairness(c, metric)
    if disparity is None or disparity == 0:
        return prev.copy()
    occupied = c.cell_counts() > 0
    gain, lose = ((0, 1), (1, 1)) if disparity < 0 else ((1, 1), (0, 1))
    if not (occupied[gain] and occupied[lose]):
        return prev.copy()
    out = prev.copy()
    out[gain] += step
    out[lose] -= step
    out = np.where(occupied, np.maximum(out, FAIRBATCH_FLOOR), 0.0)
    return out / out.sum()


def fairbatch_row_weights(sampling, cells, y, sensitive) -> np.ndarray:
    """Loss weights that emulate resampling cells at ``sampling`` rates."""
    cells = np.asarray(cells, dtype=np.float64)
    freq = cells / cells.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(cells > 0, np.asarray(sampling) / freq, 1.0)
    return ratio[np.asarray(sensitive), np.asarray(y)]


@dataclass
class DebiasState:
    """Mitigation state owned by one client."""

    strategy: str = "none"
    fairbatch_step: float = 1e-2
    local_table: Optional[np.ndarray] = None
    global_table: Optional[np.ndarray] = None
    sampling: Optional[np.ndarray] = None
    cells: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


def apply_strategy(state: DebiasState, y, sensitive, census: Optional[GroupCensus] = None,
                   metric: str = "eod") -> np.ndarray:
    """Per-row sample weights for the client's next local training pass.

    ``census`` is the current global model evaluated on the client's rows;
    only the FairBatch strategy reads it, to adapt its sampling rates.
    """
    y = np.asarray(y)
    sensitive = np.asarray(sensitive)
    n = y.shape[0]
    if n == 0:
        raise ValueError("client has no rows")
    if state.cells is None:
        cells = np.zeros((2, 2), dtype=np.int64)
        np.add.at(cells, (sensitive, y), 1)
        state.cells = cells

    if state.strategy == "none":
        return np.ones(n)
    if state.strategy == "local-reweigh":
        if state.local_table is None:
            state.local_table = reweigh_table(state.cells)
        return row_weights(state.local_table, y, sensitive)
    if state.strategy == "global-reweigh":
        if state.global_table is None:
            raise RuntimeError("global reweighing table was never broadcast to this client")
        return row_weights(state.global_table, y, sensitive)

    if state.sampling is None:
        state.sampling = state.cells / state.cells.sum()
    if census is not None:
        state.sampling = fairbatch_weights(state.sampling, census, state.fairbatch_step, metric)
    return fairbatch_row_weights(state.sampling, state.cells, y, sensitive)


@dataclass
class DebiasAssignment:
    strategies: list
    fairbatch_step: float = 1e-2

    def __post_init__(self):
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}")

    @classmethod
    def uniform(cls, strategy: str, n_clients: int, fairbatch_step: float = 1e-2):
        return cls([strategy] * n_clients, fairbatch_step)

    @classmethod
    def from_spec(cls, spec, n_clients: int, seed: int = 0) -> "DebiasAssignment":
        """Build from a config value.

        Accepts a strategy name, a per-client list, or a mapping
        ``{"fraction": f, "strategy": s, "rest": r}`` where
        ``round(f * K)`` clients, picked at random from ``seed``, run ``s``
        and the others run ``r``.
        """
        if spec is None:
            return cls.uniform("none", n_clients)
        if isinstance(spec, str):
            return cls.uniform(spec, n_clients)
        if isinstance(spec, (list, tuple)):
            if len(spec) != n_clients:
                raise ValueError(f"expected {n_clients} strategies, got {len(spec)}")
            return cls(list(spec))
        step = float(spec.get("fairbatch_step", 1e-2))
        if "clients" in spec:
            return cls(list(spec["clients"]), step)
        if "fraction" in spec:
            fraction = float(spec["fraction"])
            if not 0.0 <= fraction <= 1.0:
                raise ValueError("fraction must lie in [0, 1]")
            n_adopt = int(np.floor(fraction * n_clients + 0.5))
            chosen = derive_rng(seed, "debias-assignment").permutation(n_clients)[:n_adopt]
            out = [spec.get("rest", "none")] * n_clients
            for k in chosen:
                out[k] = spec.get("strategy", "local-reweigh")
            return cls(out, step)
        return cls.uniform(spec.get("strategy", "none"), n_clients, step)

    def states(self) -> list:
        return [DebiasState(s, self.fairbatch_step) for s in self.strategies]


class Reweighing(BaseEstimator):
    """Scikit-learn style reweighing fitted on labels and sensitive values."""

    def fit(self, y, sensitive):
        y = check_binary(y, "y")
        sensitive = check_binary(sensitive, "sensitive")
        cells = np.zeros((2, 2), dtype=np.int64)
        np.add.at(cells, (sensitive, y), 1)
        self.table_ = reweigh_table(cells)
        return self

    def sample_weight(self, y, sensitive) -> np.ndarray:
        check_is_fitted(self, "table_")
        return row_weights(self.table_, check_binary(y, "y"), check_binary(sensitive, "sensitive"))

    def fit_sample_weight(self, y, sensitive) -> np.ndarray:
        return self.fit(y, sensitive).sample_weight(y, sensitive)
