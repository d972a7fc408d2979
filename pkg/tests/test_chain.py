import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splitlearn.chain import (
    Accessibility,
    ChainConfig,
    LinkRole,
    Monolith,
    Task,
    backward_center,
    build_chain,
    forward_back_and_loss,
    forward_center,
    forward_front,
    mini_conv_chain,
    split_train_step,
)
from splitlearn.tensor_core import Sequential


def _batch(task, seed, b=6, size=16):
    rng = np.random.default_rng(seed)
    x = rng.random((b, 1, size, size)).astype(np.float32)
    if task is Task.BINARY:
        y = (rng.random(b) < 0.5).astype(np.float32)
    else:
        y = (rng.random((b, 5)) < 0.3).astype(np.float32)
    return x, y


def _params_equal(a, b):
    return len(a) == len(b) and all(np.array_equal(p.data, q.data) for p, q in zip(a, b))


def test_default_cuts_put_final_dense_in_back():
    cfg = mini_conv_chain(Task.MULTILABEL)
    assert len(cfg.architecture) == 10 and cfg.back_cut == 9
    front, center, back = build_chain(cfg, np.random.default_rng(0))
    assert len(front.layers) == 2
    assert [type(l).__name__ for l in back.layers] == ["Dense"]
    cfg = mini_conv_chain(Task.BINARY)
    assert cfg.back_cut == 9
    assert [s.kind for s in cfg.architecture[cfg.back_cut:]] == ["dense", "sigmoid"]


@pytest.mark.parametrize("cuts", [(2, 2), (0, 5), (3, 11), (5, 4)])
def test_invalid_cuts_rejected(cuts):
    arch = mini_conv_chain(Task.BINARY).architecture
    with pytest.raises(ValueError):
        ChainConfig(arch, *cuts)


def test_roles_and_accessibility():
    front, center, back = build_chain(mini_conv_chain(), np.random.default_rng(0))
    assert (front.role, center.role, back.role) == (LinkRole.FRONT, LinkRole.CENTER, LinkRole.BACK)
    assert front.accessibility is back.accessibility is Accessibility.LOCAL
    assert center.accessibility is Accessibility.CENTRAL
    with pytest.raises(ValueError):
        forward_front(center, np.zeros((1, 1, 16, 16), dtype=np.float32))


def test_forward_front_matches_monolith_prefix():
    cfg = mini_conv_chain()
    front, _, _ = build_chain(cfg, np.random.default_rng(3))
    mono = Monolith(cfg, np.random.default_rng(3))
    x, _ = _batch(Task.BINARY, 0)
    prefix = Sequential(mono.net.layers[:cfg.front_cut])
    assert np.array_equal(forward_front(front, x), prefix.forward(x))


@pytest.mark.parametrize("task", list(Task))
def test_split_loss_equals_monolith_loss(task):
    cfg = mini_conv_chain(task, front_cut=3, back_cut=8)
    front, center, back = build_chain(cfg, np.random.default_rng(11))
    mono = Monolith(cfg, np.random.default_rng(11))
    x, y = _batch(task, 1)
    loss_split, _ = forward_back_and_loss(back, forward_center(center, forward_front(front, x)), y, task)
    assert loss_split == mono.loss_and_backward(x, y)


def test_cut_gradient_matches_monolith():
    cfg = mini_conv_chain(Task.BINARY)
    front, center, back = build_chain(cfg, np.random.default_rng(2))
    x, y = _batch(Task.BINARY, 2)
    _, g_back = forward_back_and_loss(back, forward_center(center, forward_front(front, x)), y, Task.BINARY)
    g_cut = backward_center(center, g_back)
    assert g_cut.shape == forward_front(front, x).shape
    mono = Monolith(cfg, np.random.default_rng(2))
    out = mono.net.forward(x)
    from splitlearn.chain import task_loss
    _, g = task_loss(Task.BINARY, out, y)
    for layer in reversed(mono.net.layers[cfg.front_cut:]):
        g = layer.backward(g)
    assert np.array_equal(g, g_cut)


@given(seed=st.integers(0, 2**31 - 1), cut=st.sampled_from([(1, 10), (2, 9), (4, 7), (6, 8), (8, 9)]),
       task=st.sampled_from(list(Task)))
def test_split_step_bitwise_equals_monolith(seed, cut, task):
    n = 11 if task is Task.BINARY else 10
    cut = (cut[0], min(cut[1], n - 1))
    cfg = mini_conv_chain(task, front_cut=cut[0], back_cut=cut[1])
    front, center, back = build_chain(cfg, np.random.default_rng(seed))
    mono = Monolith(cfg, np.random.default_rng(seed))
    x, y = _batch(task, seed, b=4)
    assert split_train_step(front, center, back, x, y, task) == mono.train_step(x, y)
    assert _params_equal(front.params + center.params + back.params, mono.params)


def test_cut_position_does_not_change_training():
    task = Task.BINARY
    finals = []
    for cut in [(2, 9), (5, 8), (1, 10)]:
        cfg = mini_conv_chain(task, front_cut=cut[0], back_cut=cut[1])
        links = build_chain(cfg, np.random.default_rng(9))
        losses = [split_train_step(*links, *_batch(task, s, b=4), task) for s in range(4)]
        finals.append((losses, [p.data.copy() for l in links for p in l.params]))
    for losses, params in finals[1:]:
        assert losses == finals[0][0]
        assert all(np.array_equal(a, b) for a, b in zip(params, finals[0][1]))


def test_labels_shape_mismatch():
    cfg = mini_conv_chain(Task.MULTILABEL)
    mono = Monolith(cfg, np.random.default_rng(0))
    x, _ = _batch(Task.MULTILABEL, 0)
    with pytest.raises(ValueError):
        mono.loss_and_backward(x, np.zeros((6, 4), dtype=np.float32))
