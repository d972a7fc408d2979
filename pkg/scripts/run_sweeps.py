"""Run the binary and multi-label sweeps and print the tables and t-tests.

    python3 scripts/run_sweeps.py [--out runs] [--parallel N]

Cells already present under the output directory are reused.
"""
import argparse
from pathlib import Path

from splitlearn import harness

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs")
    ap.add_argument("--parallel", type=int, default=1)
    ap.add_argument("--configs", default="binary_acceptance.cfg,multilabel_acceptance.cfg")
    args = ap.parse_args()
    for name in args.configs.split(","):
        cfg = harness.load_config(CONFIGS / name)
        out = Path(args.out) / Path(name).stem
        res = harness.run_sweep(cfg, resume=True, parallel=args.parallel, output_dir=out)
        print(f"== {name} ({res.executed} cells trained, {len(res.failures)} failed) -> {out}")
        print(harness.emit_report(res.records))
        for k in cfg.client_counts:
            try:
                print(harness.compare_modes(res.records, k).line())
            except ValueError as exc:
                print(f"n_clients={k}: {exc}")
        print()


if __name__ == "__main__":
    main()
