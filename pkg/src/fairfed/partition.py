"""Heterogeneous client partitions built from per-group Dirichlet draws."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from ._rng import derive_rng
from .data import TabularDataset

GROUP_BY = ("sensitive", "label", "sensitive_label")


class PartitionError(ValueError):
    pass


@dataclass
class ClientPartition:
    """Client index per dataset row.

    ``group_by`` records how the partition was drawn; the single-group layout
    stores ``"single_group"`` and its per-group client counts in ``extra``.
    """

    n_clients: int
    assignment: np.ndarray
    alpha: float
    seed: int
    group_by: str = "sensitive"
    min_rows: int = 2
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.ndim != 1:
            raise PartitionError("assignment must be one-dimensional")
        if self.assignment.size and (self.assignment.min() < 0
                                     or self.assignment.max() >= self.n_clients):
            raise PartitionError(f"assignment entries must lie in [0, {self.n_clients})")
        small = np.flatnonzero(self.sizes() < self.min_rows)
        if small.size:
            raise PartitionError(f"clients {small.tolist()} hold fewer than {self.min_rows} rows")

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clients)

    def client_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def to_dict(self) -> dict:
        out = {
            "K": self.n_clients,
            "alpha": self.alpha,
            "seed": self.seed,
            "group_by": self.group_by,
            "min_rows": self.min_rows,
            "assignment": self.assignment.tolist(),
        }
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ClientPartition":
        known = {"K", "alpha", "seed", "group_by", "min_rows", "assignment"}
        return cls(
            n_clients=int(d["K"]),
            assignment=np.asarray(d["assignment"], dtype=np.int64),
            alpha=float(d["alpha"]),
            seed=int(d["seed"]),
            group_by=d.get("group_by", "sensitive"),
            min_rows=int(d.get("min_rows", 2)),
            extra={k: v for k, v in d.items() if k not in known},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ClientPartition":
        return cls.from_dict(json.loads(Path(path).read_text()))


def largest_remainder(proportions, total: int) -> np.ndarray:
    """Integer counts proportional to ``proportions`` that sum to ``total``.

    Each share is floored, then the leftover units go to the largest
    fractional parts (lower index first on ties).
    """
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    leftover = total - int(counts.sum())
    if leftover > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:leftover]] += 1
    return counts


def _group_keys(ds: TabularDataset, group_by: str) -> np.ndarray:
    if group_by == "sensitive":
        return ds.sensitive
    if group_by == "label":
        return ds.labels
    if group_by == "sensitive_label":
        return 2 * ds.sensitive + ds.labels
    raise ValueError(f"group_by must be one of {GROUP_BY}, got {group_by!r}")


def _allocate(rows: np.ndarray, clients: np.ndarray, alpha: float, rng, assignment) -> None:
    shuffled = rng.permutation(rows)
    p = rng.dirichlet(np.full(len(clients), alpha))
    sizes = largest_remainder(p, len(rows))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    for k, lo, hi in zip(clients, bounds[:-1], bounds[1:]):
        assignment[shuffled[lo:hi]] = k


def dirichlet_partition(ds: TabularDataset, n_clients: int, alpha: float,
                        group_by: str = "sensitive", seed: int = 0,
                        min_rows: int = 2, max_retries: int = 100) -> ClientPartition:
    """Split each group's rows across clients in Dirichlet(alpha) proportions.

    Small ``alpha`` concentrates a group on few clients; large ``alpha``
    approaches an IID split. A draw leaving some client with fewer than
    ``min_rows`` rows is redrawn from the next sub-seed.
    """
    if n_clients < 2:
        raise ValueError(f"n_clients must be at least 2, got {n_clients}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    keys = _group_keys(ds, group_by)
    n_groups = 4 if group_by == "sensitive_label" else 2
    groups = [np.flatnonzero(keys == g) for g in range(n_groups)]
    empty = [g for g, rows in enumerate(groups) if rows.size == 0]
    if empty:
        raise PartitionError(f"group cells {empty} are empty under group_by={group_by!r}")

    clients = np.arange(n_clients)
    for attempt in range(max_retries):
        rng = derive_rng(seed, "dirichlet", attempt)
        assignment = np.full(ds.n_rows, -1, dtype=np.int64)
        for rows in groups:
            _allocate(rows, clients, alpha, rng, assignment)
        if np.bincount(assignment, minlength=n_clients).min() >= min_rows:
            return ClientPartition(n_clients, assignment, alpha, seed, group_by, min_rows)
    raise PartitionError(
        f"no draw gave every client {min_rows}+ rows after {max_retries} attempts"
    )


def single_group_partition(ds: TabularDataset, n_unprivileged: int, n_privileged: int,
                           alpha: float, seed: int = 0, min_rows: int = 2,
                           max_retries: int = 100) -> ClientPartition:
    """Clients that each hold a single sensitive group.

    The first ``n_unprivileged`` clients receive only ``A=0`` rows and the
    rest only ``A=1`` rows. Inside each group, every label's rows are split
    across that group's clients in Dirichlet(alpha) proportions.
    """
    if n_unprivileged < 1 or n_privileged < 1:
        raise ValueError("both groups need at least one client")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    n_clients = n_unprivileged + n_privileged
    client_sets = {0: np.arange(n_unprivileged), 1: np.arange(n_unprivileged, n_clients)}
    cells = {}
    for a in (0, 1):
        if not np.any(ds.sensitive == a):
            raise PartitionError(f"sensitive group A={a} is empty")
        for y in (0, 1):
            cells[a, y] = np.flatnonzero((ds.sensitive == a) & (ds.labels == y))

    for attempt in range(max_retries):
        rng = derive_rng(seed, "single-group", attempt)
        assignment = np.full(ds.n_rows, -1, dtype=np.int64)
        for (a, _), rows in cells.items():
            if rows.size:
                _allocate(rows, client_sets[a], alpha, rng, assignment)
        if np.bincount(assignment, minlength=n_clients).min() >= min_rows:
            return ClientPartition(
                n_clients, assignment, alpha, seed, "single_group", min_rows,
                extra={"n_unprivileged": n_unprivileged, "n_privileged": n_privileged},
            )
    raise PartitionError(
        f"no draw gave every client {min_rows}+ rows after {max_retries} attempts"
    )


def partition_stats(ds: TabularDataset, part: ClientPartition) -> pd.DataFrame:
    """Per-client row count and (A, Y) cell counts."""
    if part.assignment.shape[0] != ds.n_rows:
        raise ValueError("partition and dataset have different row counts")
    counts = np.zeros((part.n_clients, 2, 2), dtype=np.int64)
    np.add.at(counts, (part.assignment, ds.sensitive, ds.labels), 1)
    return pd.DataFrame({
        "client": np.arange(part.n_clients),
        "n": counts.sum(axis=(1, 2)),
        "a0_y0": counts[:, 0, 0],
        "a0_y1": counts[:, 0, 1],
        "a1_y0": counts[:, 1, 0],
        "a1_y1": counts[:, 1, 1],
    })


def build_partition(ds: TabularDataset, spec: dict, seed: int) -> ClientPartition:
    """Partition from a run-config block.

    ``spec`` holds ``K`` with either ``alpha`` (plus optional ``group_by``)
    or ``single_group: {"unprivileged": u, "privileged": p, "alpha": a}``.
    """
    min_rows = int(spec.get("min_rows", 2))
    single: Optional[dict] = spec.get("single_group")
    if single:
        return single_group_partition(
            ds, int(single["unprivileged"]), int(single["privileged"]),
            float(single.get("alpha", spec.get("alpha", 0.5))), seed, min_rows,
        )
    return dirichlet_partition(
        ds, int(spec["K"]), float(spec["alpha"]), spec.get("group_by", "sensitive"),
        seed, min_rows,
    )
