"""Command line: ``python -m splitlearn {run,report,compare}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness

EXIT_OK, EXIT_FAILED_CELL, EXIT_CONFIG = 0, 1, 2


def _run(args) -> int:
    try:
        config = harness.load_config(args.config)
        result = harness.run_sweep(config, resume=args.resume, parallel=args.parallel)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{len(result.records)} cells ok ({result.executed} executed), {len(result.failures)} failed; "
          f"results in {result.output_dir}")
    if result.records:
        print(harness.emit_report(result.records), end="")
    return EXIT_FAILED_CELL if result.failures else EXIT_OK


def _load(directory) -> list:
    path = Path(directory) / "results.csv"
    if not path.exists():
        raise harness.ConfigError(f"no results.csv in {directory}")
    return harness.read_results(path)


def _report(args) -> int:
    try:
        records = _load(args.dir)
        print(harness.emit_report(records), end="")
    except (harness.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _compare(args) -> int:
    try:
        print(harness.compare_modes(_load(args.dir), args.clients).line())
    except (harness.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitlearn")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a sweep from a key=value config file")
    run.add_argument("--config", required=True)
    run.add_argument("--parallel", type=int, default=1, help="cells to run concurrently")
    run.add_argument("--resume", action="store_true", help="skip cells already present with a matching hash")
    run.set_defaults(func=_run)
    rep = sub.add_parser("report", help="print the per-client-count table")
    rep.add_argument("--dir", required=True)
    rep.set_defaults(func=_report)
    cmp_ = sub.add_parser("compare", help="Welch t-test of split vs non-collaborative")
    cmp_.add_argument("--dir", required=True)
    cmp_.add_argument("--clients", type=int, required=True)
    cmp_.set_defaults(func=_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)
