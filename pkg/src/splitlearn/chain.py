"""U-shaped three-link chain: local front, central center, local back.

The three links are slices of one layer list built from a single seeded
generator, so the split chain and the monolithic network evaluate the very
same floating-point operations in the same order.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    Adam,
    AdamHyperParams,
    LayerSpec,
    Sequential,
    ShapeError,
    bce_loss,
    mini_conv_net,
    multi_label_bce_loss,
)


class Accessibility(enum.Enum):
    LOCAL = "local"
    CENTRAL = "central"


class LinkRole(enum.Enum):
    FRONT = "front"
    CENTER = "center"
    BACK = "back"


ROLE_ACCESS = {
    LinkRole.FRONT: Accessibility.LOCAL,
    LinkRole.CENTER: Accessibility.CENTRAL,
    LinkRole.BACK: Accessibility.LOCAL,
}


class Task(enum.Enum):
    BINARY = "binary"
    MULTILABEL = "multilabel"


@dataclass(frozen=True)
class ChainConfig:
    architecture: tuple[LayerSpec, ...]
    front_cut: int
    back_cut: int
    n_outputs: int = 1
    task: Task = Task.BINARY
    input_shape: tuple[int, ...] = (1, 16, 16)

    def __post_init__(self):
        object.__setattr__(self, "architecture", tuple(self.architecture))
        n = len(self.architecture)
        if not 1 <= self.front_cut < self.back_cut <= n - 1:
            raise ValueError(
                f"invalid cuts front_cut={self.front_cut}, back_cut={self.back_cut} "
                f"for {n} layers; need 1 <= front_cut < back_cut <= {n - 1}")

    def link_slices(self) -> dict[LinkRole, slice]:
        return {
            LinkRole.FRONT: slice(0, self.front_cut),
            LinkRole.CENTER: slice(self.front_cut, self.back_cut),
            LinkRole.BACK: slice(self.back_cut, len(self.architecture)),
        }

    def with_cuts(self, front_cut: int, back_cut: int) -> "ChainConfig":
        return ChainConfig(self.architecture, front_cut, back_cut, self.n_outputs, self.task, self.input_shape)


def mini_conv_chain(task: Task = Task.BINARY, image_size: int = 16, in_channels: int = 1,
                    n_labels: int = 5, front_cut: int = 2, back_cut: int | None = None) -> ChainConfig:
    """MiniConvNet chain; by default the back link starts at the final Dense."""
    n_outputs = 1 if task is Task.BINARY else n_labels
    arch = mini_conv_net(in_channels, image_size, n_outputs, output_sigmoid=task is Task.BINARY)
    if back_cut is None:
        back_cut = max(i for i, spec in enumerate(arch) if spec.kind == "dense")
    return ChainConfig(tuple(arch), front_cut, back_cut, n_outputs, task, (in_channels, image_size, image_size))


class Link(Sequential):
    """A contiguous slice of the network with an owner role and its Adam states."""

    def __init__(self, role: LinkRole, layers, offset: int = 0, hyper: AdamHyperParams | None = None):
        super().__init__(layers, offset)
        self.role = role
        self.accessibility = ROLE_ACCESS[role]
        self.optimizer = Adam(self.params, hyper or AdamHyperParams())

    @property
    def adam_states(self):
        return self.optimizer.states

    def step(self) -> None:
        self.optimizer.step()

    def __repr__(self):
        return f"Link({self.role.value}, {self.accessibility.value}, layers={self.layers!r})"


def build_layers(config: ChainConfig, rng: np.random.Generator):
    return [spec.build(rng) for spec in config.architecture]


def build_chain(config: ChainConfig, rng: np.random.Generator,
                hyper: AdamHyperParams | None = None) -> tuple[Link, Link, Link]:
    layers = build_layers(config, rng)
    s = config.link_slices()
    return tuple(Link(role, layers[sl], sl.start, hyper) for role, sl in s.items())


class Monolith:
    """The unsplit network, used by centralized/non-collaborative training and as the test oracle."""

    def __init__(self, config: ChainConfig, rng: np.random.Generator, hyper: AdamHyperParams | None = None):
        self.config = config
        self.net = Sequential(build_layers(config, rng))
        self.optimizer = Adam(self.net.params, hyper or AdamHyperParams())

    @property
    def params(self):
        return self.net.params

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x)

    def loss_and_backward(self, x: np.ndarray, labels: np.ndarray) -> float:
        out = self.net.forward(x)
        loss, grad = task_loss(self.config.task, out, labels)
        self.net.backward(grad, need_input_grad=False)
        return loss

    def train_step(self, x: np.ndarray, labels: np.ndarray) -> float:
        loss = self.loss_and_backward(x, labels)
        self.optimizer.step()
        return loss


def task_loss(task: Task, output: np.ndarray, labels: np.ndarray):
    labels = np.asarray(labels, dtype=output.dtype)
    if task is Task.BINARY:
        labels = labels.reshape(output.shape) if labels.size == output.size else labels
        if labels.shape != output.shape:
            raise ShapeError(f"binary labels {labels.shape} do not match output {output.shape}")
        return bce_loss(output, labels)
    if labels.shape != output.shape:
        raise ShapeError(f"multi-label targets {labels.shape} do not match logits {output.shape}")
    return multi_label_bce_loss(output, labels)


def _expect_role(link: Link, role: LinkRole) -> None:
    if link.role is not role:
        raise ValueError(f"expected a {role.value} link, got {link.role.value}")


def forward_front(front: Link, batch: np.ndarray) -> np.ndarray:
    _expect_role(front, LinkRole.FRONT)
    return front.forward(batch)


def forward_center(center: Link, cut_activation: np.ndarray) -> np.ndarray:
    _expect_role(center, LinkRole.CENTER)
    return center.forward(cut_activation)


def forward_back_and_loss(back: Link, pre_back_activation: np.ndarray, labels: np.ndarray,
                          task: Task) -> tuple[float, np.ndarray]:
    """Decode, score against local labels, and return the gradient headed for the center."""
    _expect_role(back, LinkRole.BACK)
    out = back.forward(pre_back_activation)
    loss, grad = task_loss(task, out, labels)
    return loss, back.backward(grad)


def backward_center(center: Link, grad_from_back: np.ndarray) -> np.ndarray:
    _expect_role(center, LinkRole.CENTER)
    return center.backward(grad_from_back)


def backward_front(front: Link, grad_from_center: np.ndarray) -> None:
    _expect_role(front, LinkRole.FRONT)
    front.backward(grad_from_center, need_input_grad=False)


def step_all(front: Link, center: Link, back: Link) -> None:
    for link in (front, center, back):
        link.step()


def split_train_step(front: Link, center: Link, back: Link, batch: np.ndarray, labels: np.ndarray,
                     task: Task) -> float:
    """One in-process split step (no transport); mirrors :meth:`Monolith.train_step`."""
    act = forward_front(front, batch)
    pre_back = forward_center(center, act)
    loss, g = forward_back_and_loss(back, pre_back, labels, task)
    g = backward_center(center, g)
    backward_front(front, g)
    step_all(front, center, back)
    return loss
