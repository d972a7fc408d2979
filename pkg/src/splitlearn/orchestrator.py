"""Training drivers for split-collaborative, non-collaborative and centralized modes.

Split mode runs the real protocol: a :class:`CenterServer` owns the center
link and answers frames; every client owns its own front/back links and,
before its epoch, downloads the local-state snapshot the previous client
uploaded. Clients are visited one epoch each per round.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import metrics
from .chain import (
    ChainConfig,
    Monolith,
    Task,
    backward_center,
    backward_front,
    build_chain,
    forward_back_and_loss,
    forward_center,
    forward_front,
    task_loss,
)
from .data import NO_AUGMENT, AugmentSpec, Dataset, PartitionPlan, augment_batch
from .protocol import (
    Ack,
    ActivationFwd,
    BeginEpoch,
    ByteCounter,
    EndEpoch,
    ErrorCode,
    GradientBwd,
    ProtocolError,
    SnapshotDownload,
    SnapshotUpload,
    apply_snapshot,
    take_snapshot,
)
from .tensor_core import AdamHyperParams
from .transport import ConnectionLost, SocketEndpoint, SocketServer, connect_loopback

log = logging.getLogger(__name__)

EVAL_SESSION = 0xFFFFFFFF


class Mode(enum.Enum):
    SPLIT = "split"
    NONCOLLAB = "noncollab"
    CENTRALIZED = "centralized"


class Decision(enum.Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass(frozen=True)
class TrainControl:
    patience: int = 30
    max_rounds: int = 100
    batch_size: int = 24
    plateau_metric: str | None = None     # "accuracy" | "loss"; None picks the task default
    hyper: AdamHyperParams = field(default_factory=AdamHyperParams)
    seed: int = 0
    augment: AugmentSpec = NO_AUGMENT
    shuffle_clients: bool = False
    eval_each_client: bool = False
    eval_batch_size: int = 250
    max_retries: int = 1

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.plateau_metric not in (None, "accuracy", "loss"):
            raise ValueError(f"unknown plateau metric {self.plateau_metric!r}")

    def monitor(self, task: Task) -> str:
        if self.plateau_metric is not None:
            return self.plateau_metric
        return "accuracy" if task is Task.BINARY else "loss"


@dataclass
class EpochLog:
    round: int
    client_id: int
    train_loss: float
    validation_loss: float | None = None
    validation_metric: float | None = None
    bytes: dict = field(default_factory=dict)

    def to_line(self) -> str:
        return json.dumps({
            "round": self.round,
            "client_id": self.client_id,
            "train_loss": self.train_loss,
            "validation_loss": self.validation_loss,
            "validation_metric": self.validation_metric,
            "bytes": self.bytes,
        })


@dataclass
class Evaluation:
    loss: float
    metric: float
    outputs: np.ndarray


@dataclass
class RoundResult:
    round: int
    validation_loss: float
    validation_metric: float
    evaluation: Evaluation
    state: list[np.ndarray]


@dataclass
class RunResult:
    mode: Mode
    n_clients: int
    seed: int
    task: Task
    score: float
    ci: metrics.ConfidenceInterval
    best_round: int
    rounds: int
    logs: list[EpochLog]
    history: list[RoundResult]
    bytes: ByteCounter
    final_params: list[np.ndarray]

    @property
    def best_state(self) -> list[np.ndarray]:
        return self.history[self.best_round].state

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for entry in self.logs:
                fh.write(entry.to_line() + "\n")


# --------------------------------------------------------------------------
# stopping and selection


def plateau_check(history, patience: int, higher_is_better: bool = True) -> Decision:
    """Stop once the best value (earliest on ties) is more than ``patience`` entries old."""
    if len(history) == 0:
        raise ValueError("empty history")
    values = np.asarray(history, dtype=np.float64)
    best = int(np.argmax(values) if higher_is_better else np.argmin(values))
    return Decision.STOP if len(values) - 1 - best > patience else Decision.CONTINUE


def select_best(logs) -> int:
    """Index of the lowest validation loss, earliest on ties.

    Accepts plain loss values or objects with a ``validation_loss`` attribute.
    """
    losses = [getattr(x, "validation_loss", x) for x in logs]
    if not losses:
        raise ValueError("no log entries")
    return int(np.argmin(np.asarray(losses, dtype=np.float64)))


# --------------------------------------------------------------------------
# batches and evaluation


def client_batches(dataset: Dataset, indices, ctl: TrainControl, round_idx: int, client_id: int):
    """One epoch of shuffled, augmented mini-batches for one client."""
    rng = np.random.default_rng([ctl.seed, round_idx, client_id])
    order = rng.permutation(np.asarray(indices, dtype=np.int64))
    for start in range(0, len(order), ctl.batch_size):
        idx = order[start:start + ctl.batch_size]
        yield augment_batch(dataset.images[idx], ctl.augment, rng), dataset.labels[idx]


def score_outputs(task: Task, outputs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(validation loss, task metric) for stacked network outputs."""
    loss, _ = task_loss(task, outputs, labels)
    if task is Task.BINARY:
        return loss, metrics.accuracy(outputs, labels)
    return loss, metrics.mean_auroc(outputs, labels)


def _evaluate(forward, dataset: Dataset, val_idx, task: Task, batch_size: int) -> Evaluation:
    val_idx = np.asarray(val_idx, dtype=np.int64)
    outs = [forward(dataset.images[val_idx[s:s + batch_size]]) for s in range(0, len(val_idx), batch_size)]
    outputs = np.concatenate(outs)
    loss, metric = score_outputs(task, outputs, dataset.labels[val_idx])
    return Evaluation(loss, metric, outputs)


def _mean_auroc_or_nan(scores, labels) -> float:
    try:
        return metrics.mean_auroc(scores, labels)
    except metrics.NoDiscriminationPossible:
        return math.nan


def _final_score(task: Task, history: list[RoundResult], labels: np.ndarray, seed: int,
                 n_resamples: int = 1000) -> tuple[int, float, metrics.ConfidenceInterval]:
    """Binary: highest validation accuracy. MultiLabel: AUROC of the lowest-loss round."""
    if task is Task.BINARY:
        best = int(np.argmax([h.validation_metric for h in history]))
        ev = history[best].evaluation
        correct = ((ev.outputs.ravel() >= 0.5) == (labels.ravel() == 1)).astype(np.float64)
        ci = metrics.bootstrap_ci(correct, None, n_resamples, 0.95, seed)
        return best, history[best].validation_metric, ci
    best = select_best(history)
    ev = history[best].evaluation
    scores = expit(ev.outputs.astype(np.float64))
    rows = np.arange(len(labels))
    ci = metrics.bootstrap_ci(rows, lambda r: _mean_auroc_or_nan(scores[r], labels[r]), n_resamples, 0.95, seed)
    return best, history[best].validation_metric, ci


# --------------------------------------------------------------------------
# server and client sides of split mode


class CenterServer:
    """Hosts the center link and the latest uploaded local-state snapshot."""

    def __init__(self, center):
        self.center = center
        self.snapshot = None
        self.active_client: int | None = None
        self._pending: tuple[int, int] | None = None

    def handle(self, msg):
        match msg:
            case BeginEpoch():
                self.active_client = msg.client_id
                self._pending = None
                return Ack(msg.epoch)
            case ActivationFwd():
                out = forward_center(self.center, msg.tensor)
                self._pending = None if msg.session_id == EVAL_SESSION else (msg.session_id, msg.batch_id)
                return ActivationFwd(msg.session_id, msg.batch_id, out)
            case GradientBwd():
                if self._pending != (msg.session_id, msg.batch_id):
                    raise ProtocolError(ErrorCode.OUT_OF_ORDER,
                                        f"gradient for {(msg.session_id, msg.batch_id)}, expected {self._pending}")
                self._pending = None
                grad = backward_center(self.center, msg.tensor)
                self.center.step()
                return GradientBwd(msg.session_id, msg.batch_id, grad)
            case SnapshotUpload():
                self.snapshot = msg.snapshot
                return Ack(msg.client_id)
            case SnapshotDownload():
                if self.snapshot is None:
                    return Ack(0)
                return SnapshotUpload(self.snapshot.client_id, self.snapshot)
            case EndEpoch():
                self.active_client = None
                return Ack(msg.epoch)
        raise ProtocolError(ErrorCode.MALFORMED, f"server cannot handle {type(msg).__name__}")


class SplitClient:
    """A hospital: private data shard plus its own front and back links."""

    def __init__(self, client_id: int, front, back, task: Task, shard):
        self.client_id = client_id
        self.front = front
        self.back = back
        self.task = task
        self.shard = tuple(shard)

    def session_id(self, round_idx: int) -> int:
        return (round_idx << 16) | self.client_id

    def download_state(self, endpoint) -> bool:
        reply = endpoint.request(SnapshotDownload(self.client_id))
        if isinstance(reply, SnapshotUpload):
            apply_snapshot(reply.snapshot, self.front, self.back)
            return True
        return False

    def train_epoch(self, endpoint, dataset: Dataset, ctl: TrainControl, round_idx: int) -> float:
        endpoint.request(BeginEpoch(self.client_id, round_idx))
        session = self.session_id(round_idx)
        losses = []
        for batch_id, (x, y) in enumerate(client_batches(dataset, self.shard, ctl, round_idx, self.client_id)):
            act = forward_front(self.front, x)
            reply = endpoint.request(ActivationFwd(session, batch_id, act))
            loss, g = forward_back_and_loss(self.back, reply.tensor, y, self.task)
            reply = endpoint.request(GradientBwd(session, batch_id, g))
            backward_front(self.front, reply.tensor)
            self.front.step()
            self.back.step()
            losses.append(loss)
        endpoint.request(SnapshotUpload(self.client_id, take_snapshot(self.front, self.back, self.client_id, round_idx)))
        endpoint.request(EndEpoch(self.client_id, round_idx))
        return float(np.mean(losses))

    def forward(self, endpoint, x: np.ndarray, batch_id: int = 0) -> np.ndarray:
        act = forward_front(self.front, x)
        reply = endpoint.request(ActivationFwd(EVAL_SESSION, batch_id, act))
        return self.back.forward(reply.tensor)

    def evaluate(self, endpoint, dataset: Dataset, val_idx, batch_size: int) -> Evaluation:
        counter = iter(range(1 << 30))
        return _evaluate(lambda x: self.forward(endpoint, x, next(counter)), dataset, val_idx, self.task, batch_size)


def _better(monitor: str):
    return monitor == "accuracy"


def _total_counter(endpoints) -> ByteCounter:
    total = ByteCounter()
    for ep in endpoints:
        for k, v in ep.counter.bytes.items():
            total.bytes[k] += v
        for k, v in ep.counter.frames.items():
            total.frames[k] += v
    return total


def run_split(dataset: Dataset, plan: PartitionPlan, config: ChainConfig, ctl: TrainControl,
              transport: str = "loopback", address: tuple[str, int] | None = None,
              record: bool = False, server_handler_wrap=None) -> RunResult:
    """Split-collaborative training with one-epoch-per-client rotation.

    ``transport`` is "loopback" or "socket". With "socket" and no
    ``address`` a local :class:`SocketServer` is started for the run.
    ``server_handler_wrap`` lets tests inject faults into the server side.
    """
    if plan.n_clients < 1:
        raise ValueError("need at least one client")
    if transport not in ("loopback", "socket"):
        raise ValueError(f"unknown transport {transport!r}")
    task = config.task
    _, center, _ = build_chain(config, np.random.default_rng(ctl.seed), ctl.hyper)
    clients = []
    for cid, shard in enumerate(plan.train):
        if not shard:
            raise ValueError(f"client {cid} has an empty shard")
        front, _, back = build_chain(config, np.random.default_rng(ctl.seed), ctl.hyper)
        clients.append(SplitClient(cid, front, back, task, shard))
    server = CenterServer(center)
    handler = server.handle if server_handler_wrap is None else server_handler_wrap(server.handle)

    sock_server = None
    if transport == "socket" and address is None:
        sock_server = SocketServer(handler, record=record).start()
        address = sock_server.address

    def connect():
        if transport == "loopback":
            return connect_loopback(handler, record=record)
        return SocketEndpoint.connect(*address, record=record)

    endpoints: dict[int, object] = {}
    retired = []
    monitor = ctl.monitor(task)
    history: list[RoundResult] = []
    logs: list[EpochLog] = []
    val_labels = dataset.labels[np.asarray(plan.validation, dtype=np.int64)]
    try:
        for round_idx in range(ctl.max_rounds):
            order = list(range(len(clients)))
            if ctl.shuffle_clients:
                order = list(np.random.default_rng([ctl.seed, round_idx, 1 << 20]).permutation(order))
            per_client = []
            for cid in order:
                client = clients[cid]
                before = _total_counter(list(endpoints.values()) + retired)
                train_loss = _client_epoch_with_retry(client, endpoints, retired, connect, dataset, ctl, round_idx)
                entry = EpochLog(round_idx, cid, train_loss)
                if ctl.eval_each_client or cid == order[-1]:
                    ev = client.evaluate(endpoints[cid], dataset, plan.validation, ctl.eval_batch_size)
                    entry.validation_loss, entry.validation_metric = ev.loss, ev.metric
                    state = [p.data.copy() for link in (client.front, server.center, client.back) for p in link.params]
                    per_client.append((ev, state))
                entry.bytes = _total_counter(list(endpoints.values()) + retired).delta(before).as_dict()
                logs.append(entry)
            history.append(_round_result(round_idx, per_client))
            log.debug("split round %d: loss=%.4f metric=%.4f", round_idx,
                      history[-1].validation_loss, history[-1].validation_metric)
            values = [getattr(h, "validation_metric" if monitor == "accuracy" else "validation_loss") for h in history]
            if plateau_check(values, ctl.patience, _better(monitor)) is Decision.STOP:
                break
    finally:
        for ep in list(endpoints.values()):
            ep.close()
        if sock_server is not None:
            sock_server.stop()
    best, score, ci = _final_score(task, history, val_labels, ctl.seed)
    last = clients[order[-1]]
    final = [p.data.copy() for link in (last.front, server.center, last.back) for p in link.params]
    return RunResult(Mode.SPLIT, plan.n_clients, ctl.seed, task, score, ci, best, len(history), logs, history,
                     _total_counter(list(endpoints.values()) + retired), final)


def _client_epoch_with_retry(client, endpoints, retired, connect, dataset, ctl, round_idx) -> float:
    cid = client.client_id
    attempts = 0
    start = None
    while True:
        try:
            if cid not in endpoints:
                endpoints[cid] = connect()
            ep = endpoints[cid]
            client.download_state(ep)
            start = take_snapshot(client.front, client.back, cid, round_idx)
            return client.train_epoch(ep, dataset, ctl, round_idx)
        except ConnectionLost as exc:
            attempts += 1
            dead = endpoints.pop(cid, None)
            if dead is not None:
                dead.close()
                retired.append(dead)
            if attempts > ctl.max_retries:
                raise ConnectionLost(f"client {cid}, round {round_idx}: {exc.message}") from exc
            log.warning("client %d lost its connection in round %d; restarting the epoch", cid, round_idx)
            if start is not None:
                apply_snapshot(start, client.front, client.back)


def _round_result(round_idx: int, per_client: list) -> RoundResult:
    evs = [ev for ev, _ in per_client]
    loss = metrics.client_average([e.loss for e in evs])
    metric = metrics.client_average([e.metric for e in evs])
    pick = int(np.argmin([e.loss for e in evs]))
    return RoundResult(round_idx, loss, metric, evs[pick], per_client[pick][1])


# --------------------------------------------------------------------------
# single-model modes


def train_on_stream(model: Monolith, batches) -> float:
    """Apply one Adam step per (x, y) batch; returns the mean training loss."""
    losses = [model.train_step(x, y) for x, y in batches]
    return float(np.mean(losses)) if losses else math.nan


def _run_monolith(mode: Mode, dataset: Dataset, train_idx, val_idx, config: ChainConfig,
                  ctl: TrainControl, n_clients: int) -> RunResult:
    if len(train_idx) == 0:
        raise ValueError("empty training shard")
    task = config.task
    model = Monolith(config, np.random.default_rng(ctl.seed), ctl.hyper)
    monitor = ctl.monitor(task)
    history, logs = [], []
    for round_idx in range(ctl.max_rounds):
        train_loss = train_on_stream(model, client_batches(dataset, train_idx, ctl, round_idx, 0))
        ev = _evaluate(model.predict, dataset, val_idx, task, ctl.eval_batch_size)
        logs.append(EpochLog(round_idx, 0, train_loss, ev.loss, ev.metric, {}))
        history.append(RoundResult(round_idx, ev.loss, ev.metric, ev, [p.data.copy() for p in model.params]))
        values = [h.validation_metric if monitor == "accuracy" else h.validation_loss for h in history]
        if plateau_check(values, ctl.patience, _better(monitor)) is Decision.STOP:
            break
    val_labels = dataset.labels[np.asarray(val_idx, dtype=np.int64)]
    best, score, ci = _final_score(task, history, val_labels, ctl.seed)
    return RunResult(mode, n_clients, ctl.seed, task, score, ci, best, len(history), logs, history,
                     ByteCounter(), [p.data.copy() for p in model.params])


def run_non_collaborative(dataset: Dataset, plan: PartitionPlan, config: ChainConfig, ctl: TrainControl,
                          client_id: int = 0) -> RunResult:
    """One client alone on its own shard, validated on the full validation cohort."""
    shard = plan.train[client_id]
    if not shard:
        raise ValueError(f"client {client_id} has an empty shard")
    return _run_monolith(Mode.NONCOLLAB, dataset, shard, plan.validation, config, ctl, plan.n_clients)


def run_centralized(dataset: Dataset, plan: PartitionPlan, config: ChainConfig, ctl: TrainControl) -> RunResult:
    return _run_monolith(Mode.CENTRALIZED, dataset, plan.all_train(), plan.validation, config, ctl, plan.n_clients)


def run_mode(mode: Mode, dataset: Dataset, plan: PartitionPlan, config: ChainConfig, ctl: TrainControl,
             transport: str = "loopback") -> RunResult:
    t0 = time.perf_counter()
    if mode is Mode.SPLIT:
        result = run_split(dataset, plan, config, ctl, transport)
    elif mode is Mode.NONCOLLAB:
        result = run_non_collaborative(dataset, plan, config, ctl)
    else:
        result = run_centralized(dataset, plan, config, ctl)
    log.info("%s n_clients=%d seed=%d score=%.4f rounds=%d (%.1fs)", mode.value, plan.n_clients, ctl.seed,
             result.score, result.rounds, time.perf_counter() - t0)
    return result
