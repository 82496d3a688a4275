"""Command-line entry point: ``fairfed {prepare,run,sweep,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import IngestError, SplitSpec, census_summary, prepare, resolve_source
from .harness import (
    ConfigError, NoRunsFound, RunConfig, SweepSpec, run_config, run_sweep, write_report,
)

logger = logging.getLogger("fairfed")


def _resolve_paths(d: dict, base: Path) -> dict:
    """Make relative dataset/schema paths in a config relative to its file."""
    for key in ("dataset", "schema"):
        value = d.get(key)
        if isinstance(value, str) and value not in ("adult", "compas"):
            p = Path(value)
            if not p.is_absolute() and (base / p).exists():
                d[key] = str((base / p).resolve())
    return d


def _load_json(path: str) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


def cmd_prepare(args) -> int:
    csv_path, schema = resolve_source(args.source, args.schema)
    split = SplitSpec(args.test_fraction, args.split_seed)
    out = Path(args.out)
    prepared = prepare(csv_path, schema, split, out / "cache")
    report = {
        "dataset": schema.name,
        "key": prepared.key,
        "privileged": list(schema.sensitive.privileged),
        "dropped_rows": prepared.n_dropped,
        "n_features": prepared.train.n_features,
        "train": census_summary(prepared.train),
        "test": census_summary(prepared.test),
    }
    text = json.dumps(report, indent=2)
    (out / "cache" / f"{schema.name}-{prepared.key}.census.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_run(args) -> int:
    d = _resolve_paths(_load_json(args.config), Path(args.config).resolve().parent)
    cfg = RunConfig.from_dict(d)
    result = run_config(cfg, args.out, force=args.force)
    s = result.summary
    state = "skipped (cached)" if result.skipped else "done"
    print(f"run {cfg.key} {state}: {result.path}")
    print(f"  seeds={s['n_seeds']} acc={s['acc_mean']:.4f} eod={s['eod_mean']:+.4f} "
          f"spd={s['spd_mean']:+.4f} std_acc={s['std_acc_mean']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    d = _load_json(args.spec)
    d["base"] = _resolve_paths(d.get("base", {}), Path(args.spec).resolve().parent)
    spec = SweepSpec.from_dict(d)
    result = run_sweep(spec, args.out, workers=args.workers, force=args.force)
    print(f"sweep {spec.name}: {len(result.summary)} cells -> {result.path}")
    if result.failed:
        print(f"  {len(result.failed)} cell(s) failed: {', '.join(result.failed)}",
              file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    path = write_report(args.dir, args.out)
    print(path.read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairfed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging (-vv for per-client messages)")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_out(p, default="fairfed-out"):
        p.add_argument("--out", default=default, help="output directory (default: %(default)s)")
        return p

    p = with_out(sub.add_parser("prepare", help="ingest, split and cache a dataset"))
    p.add_argument("source", help="built-in dataset name (adult, compas) or CSV path")
    p.add_argument("--schema", help="schema JSON (required for a CSV path)")
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = with_out(sub.add_parser("run", help="run one config over its seeds"))
    p.add_argument("config")
    p.add_argument("--force", action="store_true", help="recompute even if cached")
    p.set_defaults(func=cmd_run)

    p = with_out(sub.add_parser("sweep", help="run a grid of configs"))
    p.add_argument("spec")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render tables from a results directory")
    p.add_argument("dir")
    p.add_argument("--out", default=None, help="where to write report/ (default: DIR)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.verbose < 2:
        logging.getLogger("fairfed.fedcore").setLevel(max(level, logging.WARNING))
    try:
        return args.func(args)
    except (ConfigError, IngestError, NoRunsFound, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
