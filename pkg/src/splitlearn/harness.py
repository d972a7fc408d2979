"""Experiment sweeps over modes x client counts x seeds, with CSV outputs.

Config files are flat ``key = value`` text; ``#`` starts a comment and list
values are comma separated. See ``configs/`` for complete examples.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np

from . import metrics
from .chain import Task, mini_conv_chain
from .data import AugmentSpec, partition, synthesize
from .orchestrator import Mode, TrainControl, run_mode
from .tensor_core import AdamHyperParams

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SPLITLEARN_OUTPUT_ROOT"
RESULTS_HEADER = ["mode", "n_clients", "seed", "metric", "ci_low", "ci_high", "rounds", "bytes_total"]
SUMMARY_HEADER = ["mode", "n_clients", "n_seeds", "mean", "ci_low", "ci_high"]
MODE_ORDER = {Mode.SPLIT: 0, Mode.NONCOLLAB: 1, Mode.CENTRALIZED: 2}
ALPHAS = (0.005, 0.001)
DESK_GRID = (1, 2, 3, 5, 10, 20, 50)
FULL_GRID = (1, 2, 3, 4, 5, 8, 10, 15, 20, 25, 30, 35, 40, 45, 50)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    task: Task = Task.BINARY
    dataset_size: int | None = None       # None: 2000 binary, 4000 multilabel
    image_size: int = 16
    noise: float = 0.2
    amplitude: float | None = None
    client_counts: tuple[int, ...] = DESK_GRID
    modes: tuple[Mode, ...] = (Mode.SPLIT, Mode.NONCOLLAB)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    patience: int | None = None           # None: 30 binary, 5 multilabel
    max_rounds: int = 60
    batch_size: int = 24
    plateau_metric: str | None = None
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    rotation: bool = False
    lateral_flip_prob: float = 0.0
    axial_flip_prob: float = 0.0
    front_cut: int = 2
    back_cut: int | None = None
    eval_each_client: bool = False
    shuffle_clients: bool = False
    transport: str = "loopback"
    max_clients: int = 50
    output_dir: str = "runs/default"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.client_counts or not self.modes:
            raise ConfigError("client_counts and modes must not be empty")
        bad = [k for k in self.client_counts if not 1 <= k <= self.max_clients]
        if bad:
            raise ConfigError(f"client_counts {bad} outside [1, {self.max_clients}]")
        if self.transport not in ("loopback", "socket"):
            raise ConfigError(f"transport must be loopback or socket, got {self.transport!r}")
        if self.n_size < 8:
            raise ConfigError("dataset_size must be >= 8")

    @property
    def n_size(self) -> int:
        if self.dataset_size is not None:
            return self.dataset_size
        return 2000 if self.task is Task.BINARY else 4000

    @property
    def n_patience(self) -> int:
        if self.patience is not None:
            return self.patience
        return 30 if self.task is Task.BINARY else 5

    def control(self, seed: int) -> TrainControl:
        return TrainControl(
            patience=self.n_patience, max_rounds=self.max_rounds, batch_size=self.batch_size,
            plateau_metric=self.plateau_metric,
            hyper=AdamHyperParams(self.beta1, self.beta2, self.learning_rate, self.epsilon),
            seed=seed,
            augment=AugmentSpec(self.rotation, self.lateral_flip_prob, self.axial_flip_prob),
            shuffle_clients=self.shuffle_clients, eval_each_client=self.eval_each_client,
        )

    def chain_config(self):
        return mini_conv_chain(self.task, self.image_size, front_cut=self.front_cut, back_cut=self.back_cut)

    def cells(self) -> list[tuple[Mode, int, int]]:
        return [(m, k, s) for m in self.modes for k in self.client_counts for s in self.seeds]

    def cell_key(self, mode: Mode, n_clients: int, seed: int) -> str:
        """Content hash of everything that can change a cell's numbers."""
        skip = {"client_counts", "modes", "seeds", "transport", "output_dir", "max_clients"}
        payload = {f.name: _plain(getattr(self, f.name)) for f in dataclasses.fields(self) if f.name not in skip}
        payload.update(mode=mode.value, n_clients=n_clients, seed=seed, n_size=self.n_size,
                       n_patience=self.n_patience)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _plain(v):
    if isinstance(v, (Task, Mode)):
        return v.value
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if raw.lower() in ("none", "") and "None" in typ:
            return None
        if key == "task":
            return Task(raw.lower())
        if key == "modes":
            return tuple(Mode(x.strip().lower()) for x in raw.split(",") if x.strip())
        if key == "client_counts" and raw.lower() == "full":
            return FULL_GRID
        if key in ("client_counts", "seeds"):
            return tuple(_int_list(raw))
        if typ.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _int_list(raw: str) -> list[int]:
    out = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# --------------------------------------------------------------------------
# records


@dataclass
class RunRecord:
    mode: Mode
    n_clients: int
    seed: int
    metric: float
    ci_low: float
    ci_high: float
    rounds: int
    wall_time: float = 0.0
    bytes_by_kind: dict = field(default_factory=dict)

    @property
    def bytes_total(self) -> int:
        return int(sum(self.bytes_by_kind.values()))

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["mode"] = Mode(d["mode"])
        return cls(**d)


def _f(x: float) -> str:
    return f"{x:.6f}"


def _sorted(records):
    return sorted(records, key=lambda r: (MODE_ORDER[r.mode], r.n_clients, r.seed))


def results_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in _sorted(records):
        w.writerow([r.mode.value, r.n_clients, r.seed, _f(r.metric), _f(r.ci_low), _f(r.ci_high), r.rounds,
                    r.bytes_total])
    return buf.getvalue()


def read_results(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        bytes_total = int(row["bytes_total"])
        out.append(RunRecord(Mode(row["mode"]), int(row["n_clients"]), int(row["seed"]), float(row["metric"]),
                             float(row["ci_low"]), float(row["ci_high"]), int(row["rounds"]),
                             bytes_by_kind={"total": bytes_total} if bytes_total else {}))
    return out


def _group(records):
    groups: dict[tuple[Mode, int], list[RunRecord]] = {}
    for r in _sorted(records):
        groups.setdefault((r.mode, r.n_clients), []).append(r)
    return groups


def summarize(records) -> list[tuple[Mode, int, int, float, float, float]]:
    """Per (mode, n_clients): seed count, mean metric, mean CI bounds."""
    return [(mode, k, len(rs), float(np.mean([r.metric for r in rs])), float(np.mean([r.ci_low for r in rs])),
             float(np.mean([r.ci_high for r in rs])))
            for (mode, k), rs in _group(records).items()]


def summary_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for mode, k, n, mean, lo, hi in summarize(records):
        w.writerow([mode.value, k, n, _f(mean), _f(lo), _f(hi)])
    return buf.getvalue()


def plot_data_csv(records) -> str:
    """Mean metric against client count, one column per mode."""
    rows = summarize(records)
    modes = sorted({m for m, *_ in rows}, key=MODE_ORDER.get)
    table = {(m, k): mean for m, k, _, mean, _, _ in rows}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_clients"] + [m.value for m in modes])
    for k in sorted({k for _, k, *_ in rows}):
        w.writerow([k] + [_f(table[(m, k)]) if (m, k) in table else "" for m in modes])
    return buf.getvalue()


# --------------------------------------------------------------------------
# comparison and report


@dataclass(frozen=True)
class Comparison:
    n_clients: int
    mean_split: float
    mean_noncollab: float
    t: float
    p_value: float
    significant: dict

    def line(self) -> str:
        flags = " ".join(f"p<{a:g}:{'yes' if s else 'no'}" for a, s in self.significant.items())
        return (f"n_clients={self.n_clients} split={self.mean_split:.4f} noncollab={self.mean_noncollab:.4f} "
                f"t={self.t:.4f} p={self.p_value:.3g} {flags}")


def compare_modes(records, n_clients: int, alphas=ALPHAS) -> Comparison:
    """Split vs non-collaborative means across seeds plus Welch's two-tailed p-value."""
    split = [r.metric for r in records if r.mode is Mode.SPLIT and r.n_clients == n_clients]
    nonc = [r.metric for r in records if r.mode is Mode.NONCOLLAB and r.n_clients == n_clients]
    if len(split) < 2 or len(nonc) < 2:
        raise ValueError(f"need >= 2 seeds per mode at {n_clients} clients, have {len(split)} and {len(nonc)}")
    t, p = metrics.t_test_two_sample(split, nonc)
    return Comparison(n_clients, float(np.mean(split)), float(np.mean(nonc)), t, p, {a: p < a for a in alphas})


def fmt3(x: float) -> str:
    return str(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


def emit_report(records) -> str:
    if not records:
        raise ValueError("no records")
    rows = {(m, k): (mean, lo, hi) for m, k, _, mean, lo, hi in summarize(records)}
    counts = sorted({k for _, k in rows})
    header = ["number of clients", "Split learning mean (C.I.)", "Non collaborative mean (C.I.)"]

    def cell(mode, k):
        if (mode, k) not in rows:
            return "-"
        mean, lo, hi = rows[(mode, k)]
        return f"{fmt3(mean)} ({fmt3(lo)}, {fmt3(hi)})"

    body = [[str(k), cell(Mode.SPLIT, k), cell(Mode.NONCOLLAB, k)] for k in counts]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(3)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in body]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# sweep


def resolve_output_dir(config: ExperimentConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) if root else Path(config.output_dir)


def run_cell(config: ExperimentConfig, mode: Mode, n_clients: int, seed: int, log_path=None) -> RunRecord:
    dataset = synthesize(config.task, config.n_size, config.image_size, seed, config.noise, config.amplitude)
    plan = partition(dataset, n_clients, seed)
    t0 = time.perf_counter()
    result = run_mode(mode, dataset, plan, config.chain_config(), config.control(seed), config.transport)
    wall = time.perf_counter() - t0
    if log_path is not None:
        result.write_log(log_path)
    return RunRecord(mode, n_clients, seed, result.score, result.ci.low, result.ci.high, result.rounds, wall,
                     result.bytes.as_dict())


def _cell_worker(args):
    config, mode, n_clients, seed, cell_path, log_path = args
    try:
        record = run_cell(config, mode, n_clients, seed, log_path)
    except Exception as exc:  # a failed cell must not stop the sweep
        return mode, n_clients, seed, None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
    Path(cell_path).write_text(json.dumps({"key": config.cell_key(mode, n_clients, seed),
                                           "record": record.to_json()}, indent=1))
    return mode, n_clients, seed, record, None


@dataclass
class SweepResult:
    records: list[RunRecord]
    failures: list[tuple[Mode, int, int, str]]
    executed: int
    output_dir: Path


def run_sweep(config: ExperimentConfig, resume: bool = True, parallel: int = 1,
              output_dir: Path | None = None) -> SweepResult:
    """Run every (mode, n_clients, seed) cell and write the CSV outputs.

    With ``resume`` a cell whose result file carries the same content hash
    is loaded instead of retrained.
    """
    out = Path(output_dir) if output_dir is not None else resolve_output_dir(config)
    try:
        (out / "cells").mkdir(parents=True, exist_ok=True)
        (out / "logs").mkdir(exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    records, todo = [], []
    for mode, k, seed in config.cells():
        key = config.cell_key(mode, k, seed)
        name = f"{mode.value}-k{k}-s{seed}"
        cell_path = out / "cells" / f"{name}.json"
        if resume and cell_path.exists():
            stored = json.loads(cell_path.read_text())
            if stored.get("key") == key:
                records.append(RunRecord.from_json(stored["record"]))
                continue
        todo.append((config, mode, k, seed, str(cell_path), str(out / "logs" / f"{name}.jsonl")))

    failures = []
    if parallel > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(_cell_worker, todo))
    else:
        outcomes = [_cell_worker(args) for args in todo]
    for mode, k, seed, record, err in outcomes:
        if record is None:
            log.error("cell %s k=%d seed=%d failed: %s", mode.value, k, seed, err.splitlines()[0])
            failures.append((mode, k, seed, err))
        else:
            records.append(record)

    (out / "results.csv").write_text(results_csv(records))
    (out / "summary.csv").write_text(summary_csv(records))
    (out / "plot_data.csv").write_text(plot_data_csv(records))
    if records:
        (out / "report.txt").write_text(emit_report(records))
    fail_path = out / "failures.csv"
    if failures:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "n_clients", "seed", "error"])
        for mode, k, seed, err in failures:
            w.writerow([mode.value, k, seed, err.splitlines()[0]])
        fail_path.write_text(buf.getvalue())
    elif fail_path.exists():
        fail_path.unlink()
    return SweepResult(_sorted(records), failures, len(todo), out)
