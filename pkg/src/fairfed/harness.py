"""Experiment harness: run configs, seed averaging, sweeps and reports.

A run config describes one experimental cell (dataset, partition, method,
hyperparameters) plus the seeds to average over. Results land in a
directory keyed by the config hash, so repeated runs are skipped and an
interrupted sweep resumes where it stopped.

Output layout under ``out``::

    cache/                 prepared datasets
    runs/<hash>/           config.json, seed_<s>.jsonl, seeds.csv, summary.json
    sweeps/<name>-<hash>/  spec.json, summary.csv, selected.csv, shaped CSVs
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from filelock import FileLock

from ._rng import derive_seed
from .data import PreparedDataset, SplitSpec, prepare, resolve_source
from .debias import DebiasAssignment
from .fedcore import Federation, make_clients
from .linear_model import DEFAULT_EPOCHS, TrainConfig
from .partition import build_partition

logger = logging.getLogger(__name__)

# method -> (aggregation, client strategy); None means "taken from the debias field"
METHODS = {
    "fedavg": ("fedavg", "none"),
    "local-rw": ("fedavg", "local-reweigh"),
    "global-rw": ("fedavg", "global-reweigh"),
    "local-fairbatch": ("fedavg", "fairbatch"),
    "fairfed": ("fairfed", "none"),
    "fairfed-rw": ("fairfed", "local-reweigh"),
    "fairfed-fairbatch": ("fairfed", "fairbatch"),
    "mixed": ("fairfed", None),
}
SWEEP_AXES = ("dataset", "method", "alpha", "beta", "eta", "fraction", "metric", "lr")
SHAPED_AXES = ("beta", "eta", "fraction")
DEFAULT_LR_GRID = (1e-3, 1e-2, 1e-1)
STATS = ("acc", "eod", "spd", "std_acc", "abs_eod", "abs_spd")


class ConfigError(ValueError):
    """A run or sweep config is malformed."""


class NoRunsFound(FileNotFoundError):
    pass


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _digest(obj, n: int = 12) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()[:n]


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Run config
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """One experimental cell, averaged over ``seeds``."""

    dataset: str = "adult"
    schema: Optional[str] = None
    split: dict = field(default_factory=lambda: {"test_fraction": 0.3, "seed": 0})
    partition: dict = field(default_factory=lambda: {"K": 5, "alpha": 0.1})
    metric: str = "eod"
    method: str = "fairfed-rw"
    debias: object = None
    beta: float = 1.0
    eta: float = 1.0
    rounds: int = 30
    train: dict = field(default_factory=lambda: {"lr": 0.01, "epochs": DEFAULT_EPOCHS,
                                                 "batch": 64})
    seeds: list = field(default_factory=lambda: list(range(20)))
    participation: float = 1.0
    fairbatch_step: float = 0.01

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {sorted(METHODS)}, got {self.method!r}")
        if self.metric not in ("eod", "spd"):
            raise ConfigError(f"metric must be eod or spd, got {self.metric!r}")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if isinstance(self.seeds, int):
            self.seeds = list(range(self.seeds))
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if "K" not in self.partition and "single_group" not in self.partition:
            raise ConfigError("partition needs K (or a single_group block)")
        if "single_group" not in self.partition and "alpha" not in self.partition:
            raise ConfigError("partition needs alpha")
        train = {"lr": 0.01, "epochs": DEFAULT_EPOCHS, "batch": 64}
        unknown = set(self.train) - set(train)
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}")
        train.update(self.train)
        if isinstance(train["lr"], (list, tuple)):
            raise ConfigError("a run takes one learning rate; put an lr grid in a sweep")
        self.train = {"lr": float(train["lr"]), "epochs": int(train["epochs"]),
                      "batch": int(train["batch"])}
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.method == "mixed" and not isinstance(self.debias, dict):
            raise ConfigError("method 'mixed' needs a debias block such as "
                              "{\"fraction\": 0.5, \"strategy\": \"local-reweigh\"}")
        self.n_clients  # validates the single_group counts

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**copy.deepcopy(d))
        except (TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {name: copy.deepcopy(getattr(self, name)) for name in self.__dataclass_fields__}

    @property
    def key(self) -> str:
        return _digest(self.to_dict())

    @property
    def aggregation(self) -> str:
        return METHODS[self.method][0]

    @property
    def n_clients(self) -> int:
        single = self.partition.get("single_group")
        if single:
            try:
                return int(single["unprivileged"]) + int(single["privileged"])
            except KeyError as exc:
                raise ConfigError(f"single_group block is missing {exc}") from None
        return int(self.partition["K"])

    @property
    def alpha(self) -> float:
        single = self.partition.get("single_group")
        if single:
            return float(single.get("alpha", self.partition.get("alpha", 0.5)))
        return float(self.partition["alpha"])

    @property
    def fraction(self):
        return self.debias.get("fraction") if isinstance(self.debias, dict) else None

    def train_config(self, seed: int = 0) -> TrainConfig:
        t = self.train
        return TrainConfig(t["lr"], t["epochs"], t["batch"], seed)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(float(self.split.get("test_fraction", 0.3)), int(self.split.get("seed", 0)))

    def debias_spec(self):
        strategy = METHODS[self.method][1]
        if strategy is None or self.debias is not None and strategy == "none":
            spec = self.debias
        else:
            spec = strategy
        if isinstance(spec, dict):
            spec = {"fairbatch_step": self.fairbatch_step, **spec}
        elif isinstance(spec, str):
            spec = {"strategy": spec, "fairbatch_step": self.fairbatch_step}
        return spec

    def coords(self) -> dict:
        return {"dataset": self.dataset, "method": self.method, "alpha": self.alpha,
                "beta": self.beta, "eta": self.eta, "fraction": self.fraction,
                "metric": self.metric, "lr": self.train["lr"]}


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

_DATA_MEMO: dict = {}


def load_data(cfg: RunConfig, cache_dir=None) -> PreparedDataset:
    """Prepared train/test split for ``cfg``, memoized per process."""
    csv_path, schema = resolve_source(cfg.dataset, cfg.schema)
    split = cfg.split_spec()
    memo_key = (str(csv_path), schema.digest(), split, str(cache_dir))
    if memo_key not in _DATA_MEMO:
        _DATA_MEMO[memo_key] = prepare(csv_path, schema, split, cache_dir)
    return _DATA_MEMO[memo_key]


# ---------------------------------------------------------------------------
# Single seed
# ---------------------------------------------------------------------------


def build_federation(cfg: RunConfig, seed: int, data: PreparedDataset, transcript=None):
    part_seed = derive_seed(int(cfg.partition.get("seed", 0)), seed, "partition")
    part = build_partition(data.train, cfg.partition, part_seed)
    assignment = DebiasAssignment.from_spec(cfg.debias_spec(), part.n_clients,
                                            derive_seed(seed, "debias"))
    clients = make_clients(data.train, part, assignment)
    return Federation(
        clients, aggregation=cfg.aggregation, metric=cfg.metric, beta=cfg.beta, eta=cfg.eta,
        train=cfg.train_config(seed), seed=seed, participation=cfg.participation,
        test=data.test, transcript=transcript,
    )


def run_seed(cfg: RunConfig, seed: int, data: PreparedDataset):
    """Run one seed; returns ``(round rows, summary dict)``."""
    fed = build_federation(cfg, seed, data)
    history = fed.run(cfg.rounds)
    last = history[-1]
    test = last["test"]
    summary = {
        "seed": seed,
        "acc": test["acc"], "eod": test["eod"], "spd": test["spd"],
        "std_acc": last["std_acc"],
        "train_acc": last["acc_global"], "train_eod": last["eod"], "train_spd": last["spd"],
        "loss": last["loss"],
        "fallback_clients": sum(c.fallback_rounds > 0 for c in fed.clients),
        "n_clients": len(fed.clients),
    }
    return history, summary


def _seed_task(cfg_dict: dict, seed: int, cache_dir):
    cfg = RunConfig.from_dict(cfg_dict)
    return run_seed(cfg, seed, load_data(cfg, cache_dir))


# ---------------------------------------------------------------------------
# Aggregation across seeds
# ---------------------------------------------------------------------------


def _mean_se(values) -> tuple:
    v = np.asarray([x for x in values if x is not None and not _isnan(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


def _isnan(x) -> bool:
    return isinstance(x, float) and math.isnan(x)


def aggregate_seeds(seed_rows) -> dict:
    """Seed mean and standard error of every headline statistic.

    ``abs_eod`` averages the per-seed absolute values; ``eod`` is the
    signed mean (its absolute value is what a closest-to-zero rule ranks).
    """
    df = pd.DataFrame(list(seed_rows))
    out = {"n_seeds": int(len(df))}
    for stat in STATS:
        if stat.startswith("abs_"):
            col = [None if v is None or _isnan(v) else abs(v) for v in df[stat[4:]]]
        else:
            col = list(df[stat])
        out[f"{stat}_mean"], out[f"{stat}_se"] = _mean_se(col)
    return out


# ---------------------------------------------------------------------------
# Run directory
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    path: Path
    config: RunConfig
    seeds: pd.DataFrame
    summary: dict
    skipped: bool = False


class RunStore:
    """On-disk results of one config, guarded by a lock file."""

    def __init__(self, out_dir, cfg: RunConfig):
        self.cfg = cfg
        self.path = Path(out_dir) / "runs" / cfg.key
        self.path.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.path) + ".lock")

    def seed_done(self, seed: int) -> bool:
        return (self.path / f"seed_{seed}.json").exists()

    @property
    def complete(self) -> bool:
        return (self.path / "summary.json").exists()

    def pending(self, force: bool = False) -> list:
        if force:
            return list(self.cfg.seeds)
        return [s for s in self.cfg.seeds if not self.seed_done(s)]

    def clear(self) -> None:
        with self.lock:
            for p in self.path.iterdir():
                p.unlink()

    def write_seed(self, seed: int, history, summary) -> None:
        with self.lock:
            _write_atomic(self.path / "config.json", _canonical(self.cfg.to_dict()) + "\n")
            lines = "".join(_canonical({"seed": seed, **row}) + "\n" for row in history)
            _write_atomic(self.path / f"seed_{seed}.jsonl", lines)
            _write_atomic(self.path / f"seed_{seed}.json", _canonical(summary) + "\n")

    def finalize(self) -> RunResult:
        with self.lock:
            rows = [json.loads((self.path / f"seed_{s}.json").read_text()) for s in self.cfg.seeds]
            seeds = pd.DataFrame(rows)
            seeds.to_csv(self.path / "seeds.csv", index=False)
            summary = {"key": self.cfg.key, **self.cfg.coords(), **aggregate_seeds(rows)}
            _write_atomic(self.path / "summary.json", _canonical(summary) + "\n")
        return RunResult(self.path, self.cfg, seeds, summary)

    def load(self) -> RunResult:
        summary = json.loads((self.path / "summary.json").read_text())
        seeds = pd.read_csv(self.path / "seeds.csv")
        return RunResult(self.path, self.cfg, seeds, summary, skipped=True)


def run_config(cfg: RunConfig, out_dir, force: bool = False,
               data: Optional[PreparedDataset] = None) -> RunResult:
    """Run every seed of ``cfg`` under ``out_dir/runs/<hash>``.

    A completed run is loaded instead of recomputed unless ``force``.
    """
    store = RunStore(out_dir, cfg)
    if store.complete and not force:
        logger.info("run %s already complete; skipping", cfg.key)
        return store.load()
    if force:
        store.clear()
    data = data or load_data(cfg, Path(out_dir) / "cache")
    for seed in store.pending():
        history, summary = run_seed(cfg, seed, data)
        store.write_seed(seed, history, summary)
    return store.finalize()


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _apply_axis(d: dict, axis: str, value) -> None:
    if axis == "alpha":
        single = d.setdefault("partition", {}).get("single_group")
        if single:
            single["alpha"] = value
        else:
            d["partition"]["alpha"] = value
    elif axis == "lr":
        d.setdefault("train", {})["lr"] = value
    elif axis == "fraction":
        debias = d.get("debias")
        debias = dict(debias) if isinstance(debias, dict) else {"strategy": "local-reweigh"}
        debias["fraction"] = value
        d["debias"] = debias
        d.setdefault("method", "mixed")
    else:
        d[axis] = value


@dataclass
class SweepSpec:
    """A grid of run configs sharing a base config.

    ``grid`` maps axis names from :data:`SWEEP_AXES` to value lists. When a
    sweep has an ``lr`` axis, headline rows keep, per cell, the learning
    rate whose seed-mean tracked metric is closest to zero.
    """

    base: dict
    grid: dict
    name: str = "sweep"
    select_by: str = "abs_mean"

    def __post_init__(self):
        if not self.grid:
            raise ConfigError("sweep grid is empty")
        for axis, values in self.grid.items():
            if axis not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"sweep axis {axis!r} needs a non-empty list")
            if len(set(map(_canonical, values))) != len(values):
                raise ConfigError(f"sweep axis {axis!r} has repeated values")
        if self.select_by not in ("abs_mean", "mean_abs"):
            raise ConfigError("select_by must be 'abs_mean' or 'mean_abs'")
        self.cells()  # validate every cell up front

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        unknown = set(d) - {"base", "grid", "name", "select_by"}
        if unknown:
            raise ConfigError(f"unknown sweep keys {sorted(unknown)}")
        if "grid" not in d:
            raise ConfigError("sweep needs a grid")
        return cls(copy.deepcopy(d.get("base", {})), copy.deepcopy(d["grid"]),
                   d.get("name", "sweep"), d.get("select_by", "abs_mean"))

    @classmethod
    def from_json(cls, path) -> "SweepSpec":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {"base": self.base, "grid": self.grid, "name": self.name,
                "select_by": self.select_by}

    @property
    def key(self) -> str:
        return _digest(self.to_dict())

    @property
    def axes(self) -> list:
        return [a for a in SWEEP_AXES if a in self.grid]

    def cells(self) -> list:
        axes = self.axes
        out = []
        for values in itertools.product(*(self.grid[a] for a in axes)):
            d = copy.deepcopy(self.base)
            for axis, value in zip(axes, values):
                _apply_axis(d, axis, value)
            out.append(RunConfig.from_dict(d))
        return out


@dataclass
class SweepResult:
    path: Path
    summary: pd.DataFrame
    selected: pd.DataFrame
    failed: list


def _pool_run(tasks, workers: int, cache_dir):
    """Yield ``(task, result or exception)`` for ``(cfg, seed)`` tasks."""
    if workers <= 1:
        for cfg, seed in tasks:
            try:
                yield (cfg, seed), run_seed(cfg, seed, load_data(cfg, cache_dir))
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                yield (cfg, seed), exc
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(_seed_task, cfg.to_dict(), seed, cache_dir): (cfg, seed)
                   for cfg, seed in tasks}
        for fut in as_completed(futures):
            exc = fut.exception()
            yield futures[fut], exc if exc is not None else fut.result()


def run_sweep(spec: SweepSpec, out_dir, workers: int = 1, force: bool = False) -> SweepResult:
    """Run every (cell, seed) of ``spec`` and write the summary CSVs.

    Cells whose run fails are marked ``failed`` in the summary; the rest of
    the grid still runs.
    """
    out_dir = Path(out_dir)
    cache_dir = out_dir / "cache"
    cells = spec.cells()
    for cfg in cells:  # prepare each dataset once before any worker starts
        load_data(cfg, cache_dir)

    stores = {}
    tasks = []
    for cfg in cells:
        if cfg.key in stores:
            continue
        store = RunStore(out_dir, cfg)
        stores[cfg.key] = store
        if store.complete and not force:
            continue
        if force:
            store.clear()
        tasks.extend((cfg, s) for s in store.pending())

    errors = {}
    for (cfg, seed), result in _pool_run(tasks, workers, cache_dir):
        if isinstance(result, Exception):
            logger.error("cell %s seed %d failed: %s", cfg.key, seed, result)
            errors.setdefault(cfg.key, f"seed {seed}: {type(result).__name__}: {result}")
            continue
        stores[cfg.key].write_seed(seed, *result)

    ran = {cfg.key for cfg, _ in tasks}
    rows = []
    for cfg in cells:
        store = stores[cfg.key]
        coords = {a: cfg.coords()[a] for a in SWEEP_AXES}
        if cfg.key in errors:
            rows.append({**coords, "key": cfg.key, "status": "failed", "error": errors[cfg.key]})
            continue
        res = store.finalize() if cfg.key in ran else store.load()
        summ = {k: v for k, v in res.summary.items() if k not in coords}
        rows.append({**coords, **summ, "status": "ok", "error": ""})
    summary = pd.DataFrame(rows)
    for stat in STATS:
        for suffix in ("_mean", "_se"):
            if stat + suffix not in summary:
                summary[stat + suffix] = np.nan
    if "n_seeds" not in summary:
        summary["n_seeds"] = np.nan
    # cached runs load sorted keys; pin the order so reruns write identical bytes
    stat_cols = [f"{s}{suf}" for s in STATS for suf in ("_mean", "_se")]
    summary = summary[list(SWEEP_AXES) + ["key", "n_seeds"] + stat_cols + ["status", "error"]]
    selected = select_best_lr(summary, spec.select_by)

    path = out_dir / "sweeps" / f"{spec.name}-{spec.key}"
    path.mkdir(parents=True, exist_ok=True)
    _write_atomic(path / "spec.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    write_tables(summary, selected, path)
    return SweepResult(path, summary, selected, sorted(errors))


def _selection_score(row, select_by: str) -> float:
    metric = row["metric"]
    if select_by == "mean_abs":
        return row[f"abs_{metric}_mean"]
    return abs(row[f"{metric}_mean"])


def select_best_lr(summary: pd.DataFrame, select_by: str = "abs_mean") -> pd.DataFrame:
    """Keep, per cell, the learning rate with the tracked metric closest to zero.

    ``abs_mean`` ranks the absolute value of the seed-mean metric;
    ``mean_abs`` ranks the seed mean of per-seed absolute values. Ties go
    to the first learning rate in grid order.
    """
    ok = summary[summary["status"] == "ok"].copy()
    if ok.empty:
        return ok
    ok["score"] = [_selection_score(r, select_by) for _, r in ok.iterrows()]
    group_cols = [a for a in SWEEP_AXES if a != "lr"]
    keyed = ok.assign(_g=ok[group_cols].astype(str).agg("|".join, axis=1))
    picks = []
    for _, grp in keyed.groupby("_g", sort=False):
        scores = grp["score"].to_numpy(dtype=np.float64)
        if np.all(np.isnan(scores)):
            picks.append(grp.index[0])
        else:
            picks.append(grp.index[int(np.nanargmin(scores))])
    return ok.loc[sorted(picks)].drop(columns="score").reset_index(drop=True)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def _varying(df: pd.DataFrame, axes) -> list:
    return [a for a in axes if a in df and df[a].astype(str).nunique() > 1]


def table1(selected: pd.DataFrame) -> pd.DataFrame:
    """Methods down, (metric, alpha) blocks across: the heterogeneity table layout."""
    if selected.empty:
        return pd.DataFrame()
    index = ["dataset", "method"] + _varying(selected, ("beta", "eta", "fraction"))
    blocks = []
    for stat in ("acc", "eod", "spd"):
        wide = selected.pivot_table(index=index, columns="alpha", values=f"{stat}_mean",
                                    aggfunc="first", dropna=False, sort=False)
        wide.columns = [f"{stat}@{a:g}" for a in wide.columns]
        blocks.append(wide)
    return pd.concat(blocks, axis=1).reset_index()


def axis_table(selected: pd.DataFrame, axis: str) -> pd.DataFrame:
    """Series along one axis (beta, eta or adoption fraction) for plotting."""
    keep = ["dataset", "method", "alpha", axis, "lr", "n_seeds"]
    keep += [f"{s}{suf}" for s in STATS for suf in ("_mean", "_se")]
    keep = list(dict.fromkeys(keep))
    return selected[keep].sort_values(["dataset", "method", "alpha", axis],
                                      kind="stable").reset_index(drop=True)


def write_tables(summary: pd.DataFrame, selected: pd.DataFrame, path: Path) -> list:
    path = Path(path)
    written = []

    def emit(df, name):
        df.to_csv(path / name, index=False, float_format="%.10g")
        written.append(path / name)

    emit(summary, "summary.csv")
    emit(selected, "selected.csv")
    if not selected.empty:
        emit(table1(selected), "table1.csv")
        for axis in _varying(selected, SHAPED_AXES):
            emit(axis_table(selected, axis), f"{axis}.csv")
    return written


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def _fmt(mean, se=None) -> str:
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "n/a"
    if se is None or (isinstance(se, float) and math.isnan(se)):
        return f"{mean:.3f}"
    return f"{mean:.3f} ± {se:.3f}"


def markdown_table(df: pd.DataFrame) -> str:
    cols = [str(c) for c in df.columns]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for _, row in df.iterrows():
        cells = []
        for v in row:
            if isinstance(v, float):
                cells.append("n/a" if math.isnan(v) else f"{v:.4g}")
            else:
                cells.append(str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def _metric_blocks(selected: pd.DataFrame) -> str:
    index = ["dataset", "method"] + _varying(selected, ("beta", "eta", "fraction"))
    parts = []
    for stat, title in (("acc", "Accuracy"), ("eod", "EOD"), ("spd", "SPD"),
                        ("std_acc", "Std-Acc")):
        rows = []
        labels = selected[index].astype(str).agg("|".join, axis=1)
        alphas = sorted(selected["alpha"].unique())
        for label in dict.fromkeys(labels):
            match = labels == label
            row = dict(zip(index, label.split("|")))
            for a in alphas:
                cell = selected[match & (selected["alpha"] == a)]
                row[f"alpha={a:g}"] = (_fmt(cell.iloc[0][f"{stat}_mean"], cell.iloc[0][f"{stat}_se"])
                                       if len(cell) else "n/a")
            rows.append(row)
        parts.append(f"#### {title}\n\n" + markdown_table(pd.DataFrame(rows)))
    return "\n\n".join(parts)


def render_report(root) -> tuple:
    """Markdown report plus plot-data tables for everything under ``root``.

    Returns ``(markdown, {name: DataFrame})``. Raises :class:`NoRunsFound`
    when ``root`` holds neither sweeps nor runs.
    """
    root = Path(root)
    sweeps = sorted(root.glob("sweeps/*/summary.csv"))
    runs = sorted(root.glob("runs/*/summary.json"))
    if not sweeps and not runs:
        raise NoRunsFound(f"no runs found under {root}")
    md = [f"# Results under {root}"]
    tables = {}
    for s in sweeps:
        summary = pd.read_csv(s)
        summary["error"] = summary["error"].fillna("")
        spec = json.loads((s.parent / "spec.json").read_text())
        selected = select_best_lr(summary, spec.get("select_by", "abs_mean"))
        name = s.parent.name
        md.append(f"## Sweep {name}")
        failed = summary[summary["status"] != "ok"]
        if len(failed):
            md.append(f"{len(failed)} failed cell(s):\n\n"
                      + markdown_table(failed[["key", "error"]].reset_index(drop=True)))
        if selected.empty:
            md.append("No completed cells.")
            continue
        md.append(_metric_blocks(selected))
        tables[f"{name}/table1.csv"] = table1(selected)
        for axis in _varying(selected, SHAPED_AXES):
            t = axis_table(selected, axis)
            tables[f"{name}/{axis}.csv"] = t
            shown = t[["method", "alpha", axis, "lr"]].copy()
            for stat in ("acc", "eod", "abs_eod", "std_acc"):
                shown[stat] = [_fmt(m, e) for m, e in zip(t[f"{stat}_mean"], t[f"{stat}_se"])]
            md.append(f"### Along {axis}\n\n" + markdown_table(shown))
    if runs:
        rows = []
        for r in runs:
            summ = json.loads(r.read_text())
            rows.append({
                "run": summ["key"], "method": summ["method"], "alpha": summ["alpha"],
                "beta": summ["beta"], "eta": summ["eta"], "lr": summ["lr"],
                "seeds": summ["n_seeds"],
                "acc": _fmt(summ["acc_mean"], summ["acc_se"]),
                "eod": _fmt(summ["eod_mean"], summ["eod_se"]),
                "spd": _fmt(summ["spd_mean"], summ["spd_se"]),
                "std_acc": _fmt(summ["std_acc_mean"], summ["std_acc_se"]),
            })
        md.append("## Runs\n\n" + markdown_table(pd.DataFrame(rows)))
    return "\n\n".join(md) + "\n", tables


def write_report(root, out_dir=None) -> Path:
    text, tables = render_report(root)
    out = Path(out_dir or root) / "report"
    out.mkdir(parents=True, exist_ok=True)
    for name, df in tables.items():
        (out / name).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(out / name, index=False, float_format="%.10g")
    _write_atomic(out / "report.md", text)
    return out / "report.md"


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity")
               else os.cpu_count() or 1)
