"""Dense tensors, layers with hand-written backward passes, losses and Adam.

Activations travel between layers as plain numpy arrays; trainable values
live in :class:`Tensor` objects that carry a paired gradient buffer. Every
layer is dtype-generic so the same code runs in float32 for training and in
float64 for finite-difference checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Parameter tensor: row-major values plus an optional same-shape gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None, dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None if grad is None else np.ascontiguousarray(grad, dtype=self.data.dtype)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy(), dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def glorot_uniform_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    """Uniform samples in [-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=tuple(shape)))


# --------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: list[Tensor] = []
        self._cache = None

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(input_shape)

    def check_input(self, shape: tuple[int, ...]) -> None:
        pass

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, need_input_grad: bool = True):
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(np.zeros((in_features, out_features)))
        self.bias = Tensor(np.zeros(out_features))
        self.params = [self.weight, self.bias]

    def init_params(self, rng):
        self.weight = glorot_uniform_init((self.in_features, self.out_features),
                                          self.in_features, self.out_features, rng)
        self.bias = Tensor(np.zeros(self.out_features))
        self.params = [self.weight, self.bias]

    def check_input(self, shape):
        if len(shape) != 2 or shape[1] != self.in_features:
            raise ShapeError(f"expected (batch, {self.in_features}), got {tuple(shape)}")

    def output_shape(self, input_shape):
        return (input_shape[0], self.out_features)

    def forward(self, x):
        self._cache = x
        return x @ self.weight.data + self.bias.data

    def backward(self, grad, need_input_grad=True):
        x = self._pop_cache()
        self.weight.accumulate(x.T @ grad)
        self.bias.accumulate(grad.sum(axis=0))
        return grad @ self.weight.data.T if need_input_grad else None

    def __repr__(self):
        return f"Dense({self.in_features}, {self.out_features})"


class Conv2d(Layer):
    """2-D cross-correlation over NCHW input, lowered to a matrix product."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1, pad: int = 0):
        super().__init__()
        if kernel < 1 or stride < 1 or pad < 0:
            raise ValueError("kernel and stride must be >= 1 and pad >= 0")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.weight = Tensor(np.zeros((out_channels, in_channels, kernel, kernel)))
        self.bias = Tensor(np.zeros(out_channels))
        self.params = [self.weight, self.bias]

    def init_params(self, rng):
        k2 = self.kernel * self.kernel
        self.weight = glorot_uniform_init(self.weight.shape, self.in_channels * k2,
                                          self.out_channels * k2, rng)
        self.bias = Tensor(np.zeros(self.out_channels))
        self.params = [self.weight, self.bias]

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] != self.in_channels:
            raise ShapeError(f"expected (batch, {self.in_channels}, H, W), got {tuple(shape)}")
        if shape[2] + 2 * self.pad < self.kernel or shape[3] + 2 * self.pad < self.kernel:
            raise ShapeError(f"spatial size {shape[2:]} too small for kernel {self.kernel}")

    def output_shape(self, input_shape):
        b, _, h, w = input_shape
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        return (b, self.out_channels, ho, wo)

    def forward(self, x):
        b, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        _, o, ho, wo = self.output_shape(x.shape)
        cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
        cols = cols.reshape(b, c * k * k, ho * wo)
        out = self.weight.data.reshape(o, -1) @ cols
        out += self.bias.data[:, None]
        self._cache = (cols, x.shape)
        return out.reshape(b, o, ho, wo)

    def backward(self, grad, need_input_grad=True):
        cols, (b, c, h, w) = self._pop_cache()
        k, s, p = self.kernel, self.stride, self.pad
        o, ho, wo = grad.shape[1:]
        g = grad.reshape(b, o, ho * wo)
        wmat = self.weight.data.reshape(o, -1)
        self.weight.accumulate((g @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.weight.shape))
        self.bias.accumulate(g.sum(axis=(0, 2)))
        if not need_input_grad:
            return None
        dcols = (wmat.T @ g).reshape(b, c, k, k, ho, wo)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
        return dxp[:, :, p:p + h, p:p + w] if p else dxp

    def __repr__(self):
        return f"Conv2d({self.in_channels}, {self.out_channels}, {self.kernel}, {self.stride}, {self.pad})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad, need_input_grad=True):
        mask = self._pop_cache()
        return grad * mask if need_input_grad else None


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = expit(x)
        self._cache = y
        return y

    def backward(self, grad, need_input_grad=True):
        y = self._pop_cache()
        return grad * y * (1 - y) if need_input_grad else None


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (input_shape[0], int(np.prod(input_shape[1:])))

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input_grad=True):
        shape = self._pop_cache()
        return grad.reshape(shape) if need_input_grad else None


class MaxPool2d(Layer):
    """Non-overlapping max pooling (stride = kernel); trailing rows/cols are dropped.

    Ties route the gradient to the first maximal element in row-major order.
    """

    kind = "maxpool2d"

    def __init__(self, kernel: int):
        super().__init__()
        if kernel < 1:
            raise ValueError("kernel must be >= 1")
        self.kernel = kernel

    def check_input(self, shape):
        if len(shape) != 4 or shape[2] < self.kernel or shape[3] < self.kernel:
            raise ShapeError(f"expected (batch, C, H>={self.kernel}, W>={self.kernel}), got {tuple(shape)}")

    def output_shape(self, input_shape):
        b, c, h, w = input_shape
        return (b, c, h // self.kernel, w // self.kernel)

    def forward(self, x):
        b, c, h, w = x.shape
        k = self.kernel
        ho, wo = h // k, w // k
        views = [x[:, :, i:ho * k:k, j:wo * k:k] for i in range(k) for j in range(k)]
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)
        self._cache = (x, out)
        return out

    def backward(self, grad, need_input_grad=True):
        x, out = self._pop_cache()
        if not need_input_grad:
            return None
        b, c, h, w = x.shape
        k = self.kernel
        ho, wo = h // k, w // k
        dx = np.zeros_like(x, dtype=grad.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(k):
            for j in range(k):
                hit = x[:, :, i:ho * k:k, j:wo * k:k] == out
                hit &= ~taken
                taken |= hit
                dx[:, :, i:ho * k:k, j:wo * k:k] = grad * hit
        return dx

    def __repr__(self):
        return f"MaxPool2d({self.kernel})"


_LAYER_KINDS = {
    "dense": Dense,
    "conv2d": Conv2d,
    "relu": ReLU,
    "sigmoid": Sigmoid,
    "flatten": Flatten,
    "maxpool2d": MaxPool2d,
}


@dataclass(frozen=True)
class LayerSpec:
    """Architecture entry: a layer kind plus its constructor arguments."""

    kind: str
    args: tuple = ()

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def build(self, rng: np.random.Generator | None = None) -> Layer:
        layer = _LAYER_KINDS[self.kind](*self.args)
        if rng is not None:
            layer.init_params(rng)
        return layer

    def param_shapes(self) -> list[tuple[int, ...]]:
        return [p.shape for p in self.build().params]


def dense(i, o):
    return LayerSpec("dense", (i, o))


def conv2d(i, o, kernel, stride=1, pad=0):
    return LayerSpec("conv2d", (i, o, kernel, stride, pad))


def maxpool2d(kernel):
    return LayerSpec("maxpool2d", (kernel,))


RELU = LayerSpec("relu")
SIGMOID = LayerSpec("sigmoid")
FLATTEN = LayerSpec("flatten")


def mini_conv_net(in_channels: int = 1, image_size: int = 16, n_outputs: int = 1,
                  output_sigmoid: bool = False) -> list[LayerSpec]:
    """The desk-scale reference classifier.

    With ``output_sigmoid`` a trailing Sigmoid turns the final logits into
    probabilities (binary track); otherwise the net emits logits.
    """
    flat = 16 * (image_size // 4) ** 2
    arch = [
        conv2d(in_channels, 8, 3, 1, 1), RELU, maxpool2d(2),
        conv2d(8, 16, 3, 1, 1), RELU, maxpool2d(2),
        FLATTEN, dense(flat, 32), RELU, dense(32, n_outputs),
    ]
    if output_sigmoid:
        arch.append(SIGMOID)
    return arch


class Sequential:
    """An ordered run of layers evaluated front to back.

    ``offset`` is the index of the first layer within the full architecture;
    it is only used to name layers in error messages.
    """

    def __init__(self, layers: list[Layer], offset: int = 0):
        self.layers = list(layers)
        self.offset = offset

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            try:
                layer.check_input(x.shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {self.offset + i} ({layer!r}): {exc}") from None
            x = layer.forward(x)
        return check_finite(x, f"forward output of layers {self.offset}..{self.offset + len(self.layers) - 1}")

    def backward(self, grad: np.ndarray, need_input_grad: bool = True):
        n = len(self.layers)
        for i in reversed(range(n)):
            grad = self.layers[i].backward(grad, need_input_grad or i > 0)
        if grad is not None:
            check_finite(grad, f"input gradient of layer {self.offset}")
        for p in self.params:
            if p.grad is not None:
                check_finite(p.grad, "parameter gradient")
        return grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# --------------------------------------------------------------------------
# losses


def bce_loss(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy on probabilities, clamped to [eps, 1 - eps]."""
    prediction = np.asarray(prediction)
    target = np.asarray(target, dtype=prediction.dtype)
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction shape {prediction.shape} != target shape {target.shape}")
    p = np.clip(prediction, BCE_EPS, 1 - BCE_EPS)
    n = p.size
    loss = -(target * np.log(p) + (1 - target) * np.log1p(-p)).sum() / n
    grad = (p - target) / (p * (1 - p)) / n
    grad = np.where((prediction > BCE_EPS) & (prediction < 1 - BCE_EPS), grad, 0).astype(prediction.dtype)
    return float(loss), grad


def multi_label_bce_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Sigmoid + binary cross entropy fused in log-sum-exp form, averaged over all entries."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    if logits.shape != targets.shape:
        raise ShapeError(f"logits shape {logits.shape} != targets shape {targets.shape}")
    n = logits.size
    per = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    grad = ((expit(logits) - targets) / n).astype(logits.dtype)
    return float(per.sum() / n), grad


# --------------------------------------------------------------------------
# optimiser


@dataclass(frozen=True)
class AdamHyperParams:
    beta1: float = 0.9
    beta2: float = 0.999
    learning_rate: float = 1e-4
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_param(cls, param: Tensor) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


@dataclass
class Adam:
    """Adam over a fixed list of parameters, one :class:`AdamState` each."""

    params: list[Tensor]
    hyper: AdamHyperParams = field(default_factory=AdamHyperParams)
    states: list[AdamState] = None

    def __post_init__(self):
        if self.states is None:
            self.states = [AdamState.for_param(p) for p in self.params]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p, s, self.hyper)


def adam_step(param: Tensor, state: AdamState, hyper: AdamHyperParams) -> None:
    """Bias-corrected Adam update in place; clears ``param.grad``."""
    if param.grad is None:
        raise ValueError("adam_step: parameter has no gradient")
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise ShapeError(f"Adam moments {state.m.shape} do not mirror parameter {param.shape}")
    g = param.grad
    b1, b2 = hyper.beta1, hyper.beta2
    state.t += 1
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * (g * g)
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    param.data -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    param.grad = None
