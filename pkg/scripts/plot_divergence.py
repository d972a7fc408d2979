"""Render plot_data.csv from a sweep directory as metric vs number of clients.

    python3 scripts/plot_divergence.py runs/binary_acceptance [out.png]

Needs matplotlib, which the package itself does not depend on.
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description="plot mean metric against number of clients")
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("out", type=Path, nargs="?")
    args = ap.parse_args()
    run_dir = args.run_dir
    out = args.out or run_dir / "divergence.png"
    with open(run_dir / "plot_data.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ks = [int(r["n_clients"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    styles = {"split": ("black", "split learning"), "noncollab": ("gray", "non collaborative"),
              "centralized": ("tab:blue", "centralized")}
    for col in rows[0]:
        if col == "n_clients":
            continue
        pts = [(k, float(r[col])) for k, r in zip(ks, rows) if r[col]]
        color, label = styles.get(col, (None, col))
        ax.plot(*zip(*pts), "o-", color=color, label=label)
    ax.set_xlabel("number of clients")
    ax.set_ylabel("validation metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(out)


if __name__ == "__main__":
    main()
