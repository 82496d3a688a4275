"""Loading, encoding and splitting tabular fairness datasets.

A dataset is described by a JSON schema that assigns every CSV column one
role (``feature-continuous``, ``feature-categorical``, ``label``,
``sensitive`` or ``ignore``) and names the values that make a row positive
(label) or privileged (sensitive attribute, ``A=1``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import derive_rng

logger = logging.getLogger(__name__)

ROLES = ("feature-continuous", "feature-categorical", "label", "sensitive", "ignore")
CACHE_FORMAT_VERSION = 1
BUILTIN_DATASETS = ("adult", "compas")


class IngestError(ValueError):
    """Raised when a source file cannot be turned into a dataset."""


class SchemaError(IngestError):
    """The schema and the data (or the schema itself) disagree."""


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelRule:
    column: str
    positive: tuple


@dataclass(frozen=True)
class SensitiveRule:
    column: str
    privileged: tuple
    as_feature: bool = False


@dataclass(frozen=True)
class DatasetSchema:
    columns: dict
    label: LabelRule
    sensitive: SensitiveRule
    missing: tuple = ("?",)
    name: str = "custom"

    def __post_init__(self):
        for col, role in self.columns.items():
            if role not in ROLES:
                raise SchemaError(f"column {col!r} has unknown role {role!r}")
        for rule, role in ((self.label, "label"), (self.sensitive, "sensitive")):
            if rule.column not in self.columns:
                raise SchemaError(f"{role} rule references missing column {rule.column!r}")
            if self.columns[rule.column] != role:
                raise SchemaError(f"column {rule.column!r} must have role {role!r}")
        if not self.label.positive:
            raise SchemaError("label rule needs at least one positive value")
        if not self.sensitive.privileged:
            raise SchemaError("sensitive rule needs at least one privileged value")

    @classmethod
    def from_dict(cls, spec: dict) -> "DatasetSchema":
        try:
            label = spec["label"]
            sens = spec["sensitive"]
            return cls(
                columns=dict(spec["columns"]),
                label=LabelRule(label["column"], tuple(str(v) for v in label["positive"])),
                sensitive=SensitiveRule(
                    sens["column"],
                    tuple(str(v) for v in sens["privileged"]),
                    bool(sens.get("as_feature", False)),
                ),
                missing=tuple(spec.get("missing", ["?"])),
                name=spec.get("name", "custom"),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc!r}") from exc

    @classmethod
    def from_json(cls, path) -> "DatasetSchema":
        try:
            spec = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"schema {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(spec)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "columns": dict(self.columns),
            "label": {"column": self.label.column, "positive": list(self.label.positive)},
            "sensitive": {
                "column": self.sensitive.column,
                "privileged": list(self.sensitive.privileged),
                "as_feature": self.sensitive.as_feature,
            },
            "missing": list(self.missing),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def columns_with_role(self, role: str) -> list:
        return [c for c, r in self.columns.items() if r == role]


def builtin_dataset(name: str):
    """Path of a bundled dataset and its schema (``adult`` or ``compas``)."""
    if name not in BUILTIN_DATASETS:
        raise IngestError(f"unknown built-in dataset {name!r}; choose from {BUILTIN_DATASETS}")
    root = resources.files("fairfed.datasets")
    csv_path = Path(str(root / f"{name}.csv.gz"))
    schema = DatasetSchema.from_json(Path(str(root / f"{name}.schema.json")))
    return csv_path, schema


# ---------------------------------------------------------------------------
# Raw tables
# ---------------------------------------------------------------------------


@dataclass
class RawTable:
    """Rows of a CSV as text cells, after missing-value rows were dropped."""

    frame: pd.DataFrame
    n_dropped: int = 0

    def __post_init__(self):
        if len(self.frame) == 0:
            raise IngestError("table has no rows")

    @property
    def columns(self) -> list:
        return list(self.frame.columns)

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    def take(self, rows) -> "RawTable":
        return RawTable(self.frame.iloc[np.asarray(rows)].reset_index(drop=True))


def load_csv(path, schema: DatasetSchema) -> RawTable:
    """Read a CSV whose header names exactly the schema's columns."""
    try:
        frame = pd.read_csv(
            path, dtype=str, skipinitialspace=True, keep_default_na=False
        )
    except FileNotFoundError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise IngestError(f"{path} is empty") from exc
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot parse {path}: {exc}") from exc

    header = set(frame.columns)
    expected = set(schema.columns)
    if header != expected:
        missing = sorted(expected - header)
        unknown = sorted(header - expected)
        raise SchemaError(f"header mismatch: missing={missing} unknown={unknown}")
    if len(frame) == 0:
        raise IngestError(f"{path} has a header but no data rows")

    frame = frame.apply(lambda col: col.str.strip())
    markers = set(schema.missing) | {""}
    bad = frame.isin(markers).any(axis=1).to_numpy()
    n_dropped = int(bad.sum())
    if n_dropped:
        logger.info("dropped %d of %d rows with missing values", n_dropped, len(frame))
    kept = frame.loc[~bad].reset_index(drop=True)
    if len(kept) == 0:
        raise IngestError(f"every row of {path} has a missing value")
    return RawTable(kept, n_dropped)


# ---------------------------------------------------------------------------
# Encoded datasets
# ---------------------------------------------------------------------------


@dataclass
class TabularDataset:
    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sensitive = np.asarray(self.sensitive, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.sensitive.shape != (n,):
            raise ValueError("features, labels and sensitive must have the same row count")
        for name, arr in (("labels", self.labels), ("sensitive", self.sensitive)):
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise ValueError(f"{name} must be 0/1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.features.shape[1])]

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "TabularDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return TabularDataset(
            self.features[rows], self.labels[rows], self.sensitive[rows],
            list(self.feature_names),
        )

    def cell_counts(self) -> np.ndarray:
        """2x2 counts indexed ``[a, y]``."""
        counts = np.zeros((2, 2), dtype=np.int64)
        np.add.at(counts, (self.sensitive, self.labels), 1)
        return counts


class TabularEncoder(TransformerMixin, BaseEstimator):
    """One-hot encode categoricals and standardize continuous columns.

    Category levels and scaling statistics are learned in ``fit``; apply the
    fitted encoder to held-out rows with ``transform``. Levels unseen during
    ``fit`` encode as all zeros. A continuous column with zero variance in
    the fitted rows is dropped with a warning.

    Parameters
    ----------
    schema : DatasetSchema
    """

    def __init__(self, schema: DatasetSchema):
        self.schema = schema

    def fit(self, X: pd.DataFrame, y=None):
        schema = self.schema
        self.continuous_ = []
        self.means_ = {}
        self.scales_ = {}
        for col in schema.columns_with_role("feature-continuous"):
            values = _to_float(X[col], col)
            std = values.std()
            if not std > 0:
                warnings.warn(f"continuous column {col!r} has zero variance; dropped",
                              UserWarning, stacklevel=2)
                continue
            self.continuous_.append(col)
            self.means_[col] = values.mean()
            self.scales_[col] = std
        self.categories_ = {
            col: sorted(X[col].unique())
            for col in schema.columns_with_role("feature-categorical")
        }
        names = []
        for col, role in schema.columns.items():
            if col in self.means_:
                names.append(col)
            elif role == "feature-categorical":
                names.extend(f"{col}={level}" for level in self.categories_[col])
            elif role == "sensitive" and schema.sensitive.as_feature:
                names.append(col)
        self.feature_names_ = names
        return self

    def transform(self, X: pd.DataFrame) -> np.ndarray:
        check_is_fitted(self, "feature_names_")
        schema = self.schema
        blocks = []
        for col, role in schema.columns.items():
            if col in self.means_:
                values = _to_float(X[col], col)
                blocks.append(((values - self.means_[col]) / self.scales_[col])[:, None])
            elif role == "feature-categorical":
                levels = self.categories_[col]
                cells = X[col].to_numpy()
                blocks.append(np.stack([cells == lv for lv in levels], axis=1).astype(np.float64))
            elif role == "sensitive" and schema.sensitive.as_feature:
                blocks.append(sensitive_values(X, schema).astype(np.float64)[:, None])
        if not blocks:
            return np.zeros((len(X), 0))
        return np.hstack(blocks)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "feature_names_")
        return np.asarray(self.feature_names_, dtype=object)


def _to_float(column: pd.Series, name: str) -> np.ndarray:
    try:
        values = column.astype(np.float64).to_numpy()
    except ValueError as exc:
        raise IngestError(f"continuous column {name!r} has non-numeric cells") from exc
    if not np.all(np.isfinite(values)):
        raise IngestError(f"continuous column {name!r} has non-finite cells")
    return values


def label_values(frame: pd.DataFrame, schema: DatasetSchema) -> np.ndarray:
    rule = schema.label
    if rule.column not in frame:
        raise SchemaError(f"label column {rule.column!r} not in table")
    return frame[rule.column].isin(rule.positive).to_numpy().astype(np.int64)


def sensitive_values(frame: pd.DataFrame, schema: DatasetSchema) -> np.ndarray:
    rule = schema.sensitive
    if rule.column not in frame:
        raise SchemaError(f"sensitive column {rule.column!r} not in table")
    return frame[rule.column].isin(rule.privileged).to_numpy().astype(np.int64)


def encode(raw: RawTable, schema: DatasetSchema, fit_rows=None) -> TabularDataset:
    """Encode ``raw`` into a :class:`TabularDataset`.

    Scaling statistics and category levels come from ``fit_rows`` (all rows
    when omitted), so pass the training indices to keep held-out rows out of
    the statistics.
    """
    missing = [c for c in schema.columns if c not in raw.frame]
    if missing:
        raise SchemaError(f"schema columns not in table: {missing}")
    fit_frame = raw.frame if fit_rows is None else raw.frame.iloc[np.asarray(fit_rows)]
    encoder = TabularEncoder(schema).fit(fit_frame)
    return TabularDataset(
        encoder.transform(raw.frame),
        label_values(raw.frame, schema),
        sensitive_values(raw.frame, schema),
        list(encoder.feature_names_),
    )


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.3
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


def split_indices(labels, sensitive, spec: SplitSpec):
    """Sorted ``(train, test)`` row indices, each holding every (A, Y) cell.

    A draw that leaves a cell empty on either side is redrawn with the next
    seed, up to ``spec.max_retries`` times.
    """
    labels = np.asarray(labels)
    sensitive = np.asarray(sensitive)
    n = labels.shape[0]
    n_test = int(np.floor(n * spec.test_fraction + 0.5))
    cell = 2 * sensitive + labels
    for attempt in range(spec.max_retries):
        perm = derive_rng(spec.seed + attempt, "split").permutation(n)
        test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
        if (len(test) and len(train)
                and len(np.unique(cell[test])) == 4 and len(np.unique(cell[train])) == 4):
            return train, test
    raise IngestError(
        f"no split with all (A, Y) cells on both sides after {spec.max_retries} draws"
    )


def train_test_split(ds: TabularDataset, spec: SplitSpec):
    train, test = split_indices(ds.labels, ds.sensitive, spec)
    return ds.subset(train), ds.subset(test)


# ---------------------------------------------------------------------------
# Prepared-dataset cache
# ---------------------------------------------------------------------------


@dataclass
class PreparedDataset:
    train: TabularDataset
    test: TabularDataset
    n_dropped: int
    key: str


def resolve_source(source: str, schema_path=None):
    """Map a built-in name or a CSV path (plus schema file) to ``(path, schema)``."""
    if schema_path is None:
        if source in BUILTIN_DATASETS:
            return builtin_dataset(source)
        raise IngestError(f"{source!r} is not a built-in dataset; pass a schema file")
    csv_path = Path(source)
    if source in BUILTIN_DATASETS and not csv_path.exists():
        csv_path, _ = builtin_dataset(source)
    return csv_path, DatasetSchema.from_json(schema_path)


def cache_key(csv_path, schema: DatasetSchema, split: SplitSpec) -> str:
    h = hashlib.sha256()
    h.update(f"v{CACHE_FORMAT_VERSION}".encode())
    h.update(Path(csv_path).read_bytes())
    h.update(schema.digest().encode())
    h.update(json.dumps([split.test_fraction, split.seed]).encode())
    return h.hexdigest()[:16]


def prepare(csv_path, schema: DatasetSchema, split: SplitSpec = SplitSpec(),
            cache_dir: Optional[Path] = None) -> PreparedDataset:
    """Load, split and encode a dataset, reusing a cached copy when present.

    Scaling statistics are fitted on the training split only.
    """
    key = cache_key(csv_path, schema, split)
    cached = Path(cache_dir) / f"{schema.name}-{key}.npz" if cache_dir else None
    if cached is not None and cached.exists():
        return load_prepared(cached)

    raw = load_csv(csv_path, schema)
    train_idx, test_idx = split_indices(
        label_values(raw.frame, schema), sensitive_values(raw.frame, schema), split
    )
    ds = encode(raw, schema, fit_rows=train_idx)
    prepared = PreparedDataset(ds.subset(train_idx), ds.subset(test_idx), raw.n_dropped, key)
    if cached is not None:
        save_prepared(cached, prepared)
    return prepared


def save_prepared(path, prepared: PreparedDataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    arrays = {"version": np.array(CACHE_FORMAT_VERSION), "n_dropped": np.array(prepared.n_dropped),
              "key": np.array(prepared.key), "feature_names": np.array(prepared.train.feature_names)}
    for split_name in ("train", "test"):
        ds = getattr(prepared, split_name)
        arrays[f"{split_name}_X"] = ds.features
        arrays[f"{split_name}_y"] = ds.labels
        arrays[f"{split_name}_a"] = ds.sensitive
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_prepared(path) -> PreparedDataset:
    with np.load(path) as data:
        if int(data["version"]) != CACHE_FORMAT_VERSION:
            raise IngestError(f"cache {path} has format v{int(data['version'])}")
        names = [str(n) for n in data["feature_names"]]
        parts = {
            s: TabularDataset(data[f"{s}_X"], data[f"{s}_y"], data[f"{s}_a"], names)
            for s in ("train", "test")
        }
        return PreparedDataset(parts["train"], parts["test"], int(data["n_dropped"]), str(data["key"]))


def census_summary(ds: TabularDataset) -> dict:
    counts = ds.cell_counts()
    n = ds.n_rows
    return {
        "n": n,
        "privileged_share": float(counts[1].sum() / n),
        "unprivileged_share": float(counts[0].sum() / n),
        "positive_rate": float(counts[:, 1].sum() / n),
        "cells": {f"a{a}_y{y}": int(counts[a, y]) for a in (0, 1) for y in (0, 1)},
    }


__all__ = [
    "IngestError", "SchemaError", "DatasetSchema", "LabelRule", "SensitiveRule",
    "RawTable", "TabularDataset", "TabularEncoder", "SplitSpec", "PreparedDataset",
    "load_csv", "encode", "split_indices", "train_test_split", "prepare",
    "builtin_dataset", "resolve_source", "census_summary",
]
