"""Check that a synthetic task is learnable but not trivially so.

Prints the blob-probe accuracy (binary only) and trains single cells so the
split/non-collaborative gap can be eyeballed before committing to a sweep.

    python3 scripts/calibrate.py --task binary --noise 0.2 --clients 1,10,20
"""
import argparse
import time

import numpy as np

from splitlearn.chain import Task, mini_conv_chain
from splitlearn.data import blob_probe_feature, partition, synthesize
from splitlearn.orchestrator import Mode, TrainControl, run_mode


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--task", choices=[t.value for t in Task], default="binary")
    ap.add_argument("--n", type=int, default=None)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--noise", type=float, default=0.2)
    ap.add_argument("--amplitude", type=float, default=None)
    ap.add_argument("--clients", default="1,10,20")
    ap.add_argument("--modes", default="split,noncollab")
    ap.add_argument("--seeds", default="1")
    ap.add_argument("--max-rounds", type=int, default=60)
    args = ap.parse_args()

    task = Task(args.task)
    n = args.n or (2000 if task is Task.BINARY else 4000)
    cfg = mini_conv_chain(task, args.size)
    for seed in (int(s) for s in args.seeds.split(",")):
        ds = synthesize(task, n, args.size, seed, args.noise, args.amplitude)
        if task is Task.BINARY:
            f = blob_probe_feature(ds.images, 3)
            print(f"seed {seed}: probe accuracy {np.mean((f > np.median(f)) == (ds.labels == 1)):.3f}")
        for k in (int(c) for c in args.clients.split(",")):
            plan = partition(ds, k, seed)
            ctl = TrainControl(patience=10 if task is Task.BINARY else 5, max_rounds=args.max_rounds, seed=seed)
            for mode in (Mode(m) for m in args.modes.split(",")):
                t0 = time.perf_counter()
                r = run_mode(mode, ds, plan, cfg, ctl)
                print(f"  {mode.value:>10} k={k:<3} score={r.score:.4f} rounds={r.rounds} best={r.best_round} "
                      f"({time.perf_counter() - t0:.1f}s)", flush=True)


if __name__ == "__main__":
    main()
