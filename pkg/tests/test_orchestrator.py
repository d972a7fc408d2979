import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splitlearn.chain import Monolith, Task, build_chain, mini_conv_chain
from splitlearn.data import partition, synthesize
from splitlearn.orchestrator import (
    CenterServer,
    Decision,
    SplitClient,
    EpochLog,
    Mode,
    TrainControl,
    client_batches,
    plateau_check,
    run_centralized,
    run_mode,
    run_non_collaborative,
    run_split,
    select_best,
    train_on_stream,
)
from splitlearn.protocol import ActivationFwd, EndEpoch, GradientBwd, Tag, encode
from splitlearn.transport import ConnectionLost, connect_loopback

from oracles import conv_params, dense_params, snapshot_bytes, tensor_frame_bytes


@pytest.fixture(scope="module")
def small():
    ds = synthesize(Task.BINARY, 144, seed=0)
    return ds, mini_conv_chain(Task.BINARY)


def _ctl(rounds, **kw):
    return TrainControl(patience=100, max_rounds=rounds, seed=kw.pop("seed", 3), **kw)


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def test_plateau_examples():
    assert plateau_check([0.5, 0.6, 0.7], 30) is Decision.CONTINUE
    assert plateau_check([0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], 5) is Decision.STOP
    assert plateau_check([0.9, 0.1, 0.1, 0.1, 0.1, 0.1], 5) is Decision.CONTINUE
    assert plateau_check([0.3] * 7, 5) is Decision.STOP
    assert plateau_check([1.0, 0.5, 0.5, 0.5], 2, higher_is_better=False) is Decision.CONTINUE
    with pytest.raises(ValueError):
        plateau_check([], 5)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=40), st.integers(1, 10))
def test_plateau_matches_scan(values, patience):
    best = max(range(len(values)), key=lambda i: (values[i], -i))
    expected = Decision.STOP if len(values) - 1 - best > patience else Decision.CONTINUE
    assert plateau_check(values, patience) is expected


def test_select_best_examples():
    assert select_best([0.9, 0.4, 0.5]) == 1
    assert select_best([0.4, 0.4]) == 0
    logs = [EpochLog(i, 0, 1.0, v, 0.5) for i, v in enumerate([0.7, 0.2, 0.2])]
    assert select_best(logs) == 1
    with pytest.raises(ValueError):
        select_best([])


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30))
def test_select_best_linear_scan(losses):
    best = 0
    for i, v in enumerate(losses):
        if v < losses[best]:
            best = i
    assert select_best(losses) == best


def test_train_control_validation():
    with pytest.raises(ValueError):
        TrainControl(patience=0)
    with pytest.raises(ValueError):
        TrainControl(batch_size=0)
    with pytest.raises(ValueError):
        TrainControl(plateau_metric="f1")
    assert TrainControl().monitor(Task.BINARY) == "accuracy"
    assert TrainControl().monitor(Task.MULTILABEL) == "loss"


def test_epoch_log_line_order():
    line = EpochLog(2, 1, 0.5, 0.4, 0.9, {"sent:ack": 14}).to_line()
    assert list(json.loads(line)) == ["round", "client_id", "train_loss", "validation_loss", "validation_metric",
                                      "bytes"]


def test_one_client_split_equals_centralized(small):
    ds, cfg = small
    plan = partition(ds, 1, seed=0)
    split = run_split(ds, plan, cfg, _ctl(3))
    central = run_centralized(ds, plan, cfg, _ctl(3))
    assert _same(split.final_params, central.final_params)
    assert [h.validation_loss for h in split.history] == [h.validation_loss for h in central.history]
    assert split.score == central.score


def test_handoff_continuity(small):
    ds, cfg = small
    plan = partition(ds, 2, seed=1)
    ctl = _ctl(2)
    split = run_split(ds, plan, cfg, ctl)
    model = Monolith(cfg, np.random.default_rng(ctl.seed), ctl.hyper)
    for r in range(2):
        for cid in range(2):
            train_on_stream(model, client_batches(ds, plan.train[cid], ctl, r, cid))
    assert _same(split.final_params, [p.data for p in model.params])


def test_step_counter_spans_both_shards(small):
    ds, cfg = small
    plan = partition(ds, 2, seed=1)
    seen = {}

    def wrap(handle):
        server = handle.__self__

        def h(msg):
            reply = handle(msg)
            if isinstance(msg, EndEpoch):
                seen[msg.client_id] = ([s.t for s in server.center.adam_states],
                                       [p.data.copy() for p in server.center.params],
                                       server.snapshot)
            return reply
        return h

    run_split(ds, plan, cfg, _ctl(1), server_handler_wrap=wrap)
    batches = sum(-(-len(s) // 24) for s in plan.train)
    t_center, params0, _ = seen[0]
    t_center1, params1, snap = seen[1]
    assert set(t_center1) == {batches}
    assert {p.t for p in snap.front + snap.back} == {batches}
    assert not any(np.array_equal(a, b) for a, b in zip(params0, params1))


def test_loopback_and_socket_agree(small):
    ds, cfg = small
    plan = partition(ds, 3, seed=2)
    a = run_split(ds, plan, cfg, _ctl(2), transport="loopback")
    b = run_split(ds, plan, cfg, _ctl(2), transport="socket")
    assert _same(a.final_params, b.final_params)
    assert a.bytes.as_dict() == b.bytes.as_dict()


def test_no_raw_inputs_or_labels_cross(small):
    ds, cfg = small
    plan = partition(ds, 2, seed=0)
    wire = []

    def wrap(handle):
        def h(msg):
            reply = handle(msg)
            wire.append(encode(msg))
            wire.append(encode(reply))
            return reply
        return h

    run_split(ds, plan, cfg, _ctl(1), server_handler_wrap=wrap)
    traffic = b"".join(wire)
    tags = {frame[5] for frame in wire}
    assert tags <= {1, 2, 3, 4, 5, 6, 7}
    ctl = _ctl(1)
    for cid in range(2):
        for x, _ in client_batches(ds, plan.train[cid], ctl, 0, cid):
            assert x.tobytes() not in traffic
            for img in x:
                assert img.tobytes() not in traffic
    for i in plan.validation[:20]:
        assert ds.images[i].tobytes() not in traffic


def test_ascending_visit_order(small):
    ds, cfg = small
    plan = partition(ds, 3, seed=0)
    res = run_split(ds, plan, cfg, _ctl(2))
    assert [(e.round, e.client_id) for e in res.logs] == [(r, c) for r in range(2) for c in range(3)]
    assert all(e.bytes for e in res.logs)


def test_mode_isolation(small):
    ds, cfg = small
    plan = partition(ds, 3, seed=0)
    for mode in (Mode.NONCOLLAB, Mode.CENTRALIZED):
        assert run_mode(mode, ds, plan, cfg, _ctl(1)).bytes.total() == 0
    assert run_mode(Mode.SPLIT, ds, plan, cfg, _ctl(1)).bytes.total() > 0


def test_noncollab_uses_only_its_shard(small):
    ds, cfg = small
    plan = partition(ds, 4, seed=0)
    ctl = _ctl(2)
    res = run_non_collaborative(ds, plan, cfg, ctl, client_id=2)
    model = Monolith(cfg, np.random.default_rng(ctl.seed), ctl.hyper)
    for r in range(2):
        train_on_stream(model, client_batches(ds, plan.train[2], ctl, r, 0))
    assert _same(res.final_params, [p.data for p in model.params])


def test_stopping_law_small_shard():
    ds = synthesize(Task.BINARY, 160, seed=4)
    plan = partition(ds, 4, seed=4)
    assert len(plan.train[0]) == 30
    res = run_non_collaborative(ds, plan, mini_conv_chain(), TrainControl(patience=5, max_rounds=200, seed=4))
    assert res.rounds < 200
    assert res.rounds - 1 - res.best_round <= 6


def test_empty_shard_rejected(small):
    ds, cfg = small
    plan = partition(ds, 2, seed=0)
    plan = type(plan)((plan.train[0], ()), plan.validation, plan.seed)
    with pytest.raises(ValueError, match="client 1"):
        run_split(ds, plan, cfg, _ctl(1))
    with pytest.raises(ValueError):
        run_non_collaborative(ds, plan, cfg, _ctl(1), client_id=1)


def _flaky(fail_at):
    """Server wrapper that drops the connection at the listed GradientBwd counts."""
    count = [0]

    def wrap(handle):
        def h(msg):
            if isinstance(msg, GradientBwd):
                count[0] += 1
                if count[0] in fail_at:
                    raise ConnectionLost("injected")
            return handle(msg)
        return h
    return wrap


def test_connection_loss_restarts_epoch(small):
    ds, cfg = small
    plan = partition(ds, 2, seed=0)
    res = run_split(ds, plan, cfg, _ctl(2), server_handler_wrap=_flaky({3}))
    assert res.rounds == 2 and len(res.logs) == 4


def test_persistent_connection_loss_names_client(small):
    ds, cfg = small
    plan = partition(ds, 2, seed=0)
    with pytest.raises(ConnectionLost, match="client 0, round 0"):
        run_split(ds, plan, cfg, _ctl(2), server_handler_wrap=_flaky({1, 2, 3}))


def test_multilabel_run_and_log(small, tmp_path):
    ds = synthesize(Task.MULTILABEL, 160, seed=0)
    plan = partition(ds, 2, seed=0)
    res = run_split(ds, plan, mini_conv_chain(Task.MULTILABEL), TrainControl(patience=1, max_rounds=3, seed=0))
    assert 0 <= res.score <= 1 and res.ci.low <= res.score <= res.ci.high
    assert res.best_round == int(np.argmin([h.validation_loss for h in res.history]))
    res.write_log(tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == len(res.logs) and json.loads(lines[0])["round"] == 0


def test_activation_shapes_on_the_wire(small):
    ds, cfg = small
    plan = partition(ds, 1, seed=0)
    shapes = set()

    def wrap(handle):
        def h(msg):
            reply = handle(msg)
            if isinstance(msg, ActivationFwd):
                shapes.add((msg.tensor.shape[1:], reply.tensor.shape[1:]))
            return reply
        return h

    run_split(ds, plan, cfg, _ctl(1), server_handler_wrap=wrap)
    assert shapes == {((8, 16, 16), (32,))}


def _per_batch_exchange_bytes(front_cut):
    ds = synthesize(Task.BINARY, 64, seed=0)
    shard = partition(ds, 1, seed=0).train[0][:48]
    cfg = mini_conv_chain(Task.BINARY, front_cut=front_cut)
    front, center, back = build_chain(cfg, np.random.default_rng(0))
    ep = connect_loopback(CenterServer(center).handle)
    SplitClient(0, front, back, Task.BINARY, shard).train_epoch(ep, ds, TrainControl(batch_size=24), 0)
    return (ep.counter.total(kind=Tag.ACTIVATION_FWD) + ep.counter.total(kind=Tag.GRADIENT_BWD)) / 2


def test_exchange_vs_model_bytes():
    model_bytes = 4 * (conv_params(1, 8, 3) + conv_params(8, 16, 3) + dense_params(256, 32) + dense_params(32, 1))
    assert model_bytes == 38020
    # per-batch activation+gradient traffic exceeds the whole model at every cut that leaves
    # parameters in the center; only a cut at the 32-wide layer gets below it
    cases = {2: ((8, 16, 16), 399484), 6: ((16, 4, 4), 55420), 8: ((32,), 12396)}
    for front_cut, (cut_shape, expected) in cases.items():
        measured = _per_batch_exchange_bytes(front_cut)
        assert measured == 2 * tensor_frame_bytes(24, *cut_shape) + 2 * tensor_frame_bytes(24, 32) == expected
        assert (measured < model_bytes) == (front_cut == 8)
    # the hand-off between clients moves only the small local links
    snapshot_frame = 10 + 4 + snapshot_bytes([(8, 1, 3, 3), (8,)], [(32, 1), (1,)])
    assert snapshot_frame == 1530 < model_bytes
