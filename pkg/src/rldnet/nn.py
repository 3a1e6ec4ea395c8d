"""Layer modules, declarative layer specs, and momentum SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import functional as F
from .autodiff import Tensor

LAYER_KINDS = ("conv2d", "relu", "batchnorm2d", "maxpool2d", "gap", "hp", "fc", "dropout", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    Only the fields relevant to ``kind`` are read: ``in_channels``/``out_channels``
    (conv2d, fc, batchnorm2d uses ``out_channels``), ``kernel``/``stride``/``padding``
    (conv2d, maxpool2d), ``p`` (dropout) and ``bias`` (conv2d, fc).
    """

    kind: str
    in_channels: int = 1
    out_channels: int = 1
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    p: float = 0.5
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        for name in ("in_channels", "out_channels", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{self.kind}: {name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"{self.kind}: padding must be non-negative")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {self.p}")

    @classmethod
    def conv(cls, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int = 1, bias: bool = True):
        return cls("conv2d", in_channels=cin, out_channels=cout, kernel=kernel, stride=stride, padding=padding, bias=bias)

    @classmethod
    def bn(cls, channels: int):
        return cls("batchnorm2d", in_channels=channels, out_channels=channels)

    @classmethod
    def fc(cls, fin: int, fout: int, bias: bool = True):
        return cls("fc", in_channels=fin, out_channels=fout, bias=bias)

    def param_count(self) -> int:
        if self.kind == "conv2d":
            return self.kernel**2 * self.in_channels * self.out_channels + (self.out_channels if self.bias else 0)
        if self.kind == "fc":
            return self.in_channels * self.out_channels + (self.out_channels if self.bias else 0)
        if self.kind == "batchnorm2d":
            return 2 * self.out_channels
        return 0

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape after this layer for a single (unbatched) input shape."""
        if self.kind in ("conv2d", "maxpool2d"):
            c, h, w = shape
            if self.kind == "conv2d" and c != self.in_channels:
                raise ValueError(f"conv2d expects {self.in_channels} channels, got {c}")
            ho = F.conv_output_size(h, self.kernel, self.stride, self.padding)
            wo = F.conv_output_size(w, self.kernel, self.stride, self.padding)
            if ho < 1 or wo < 1:
                raise ValueError(f"{self.kind}: spatial size {h}x{w} too small for kernel {self.kernel}")
            return (self.out_channels if self.kind == "conv2d" else c, ho, wo)
        if self.kind == "gap":
            return (shape[0],)
        if self.kind == "hp":
            return (shape[0], shape[1])
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        if self.kind == "fc":
            if shape[-1] != self.in_channels:
                raise ValueError(f"fc expects {self.in_channels} features, got {shape[-1]}")
            return (self.out_channels,)
        return shape


class Module:
    """Container of named parameters, buffers and child modules."""

    training: bool = True

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel**2
        self.weight = self.add_param(
            "weight", _uniform(rng, (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), fan_in, dtype)
        )
        self.bias = self.add_param("bias", np.zeros(spec.out_channels, dtype)) if spec.bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.weight = self.add_param("weight", _uniform(rng, (fout, fin), fin, dtype))
        self.bias = self.add_param("bias", np.zeros(fout, dtype)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch normalisation over channel axis 1; works for ``(N, C)`` and ``(N, C, H, W)``."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = self.add_param("weight", np.ones(channels, dtype))
        self.bias = self.add_param("bias", np.zeros(channels, dtype))
        self._buffers["running_mean"] = np.zeros(channels, dtype)
        self._buffers["running_var"] = np.ones(channels, dtype)

    def forward(self, x):
        return F.batch_norm(
            x, self.weight, self.bias, self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class Dropout(Module):
    def __init__(self, p: float, seed=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        return F.dropout(x, self.p, self.training, self.rng)


class Lambda(Module):
    def __init__(self, fn, **kwargs):
        super().__init__()
        self.fn = fn
        self.kwargs = kwargs

    def forward(self, x):
        return self.fn(x, **self.kwargs)


class Sequential(Module):
    def __init__(self, layers: list[Module]):
        super().__init__()
        self.layers = layers
        for i, layer in enumerate(layers):
            self.add_child(str(i), layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def build_layer(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> Module:
    from .rld import horizontal_pool

    if spec.kind == "conv2d":
        return Conv2d(spec, rng, dtype)
    if spec.kind == "fc":
        return Linear(spec.in_channels, spec.out_channels, rng, dtype, spec.bias)
    if spec.kind == "batchnorm2d":
        return BatchNorm(spec.out_channels, dtype)
    if spec.kind == "dropout":
        return Dropout(spec.p, rng.integers(2**63))
    if spec.kind == "relu":
        return Lambda(F.relu)
    if spec.kind == "maxpool2d":
        return Lambda(F.max_pool2d, kernel=spec.kernel, stride=spec.stride, padding=spec.padding)
    if spec.kind == "gap":
        return Lambda(F.global_avg_pool)
    if spec.kind == "hp":
        return Lambda(horizontal_pool)
    return Lambda(F.flatten)


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: dict[str, Tensor], state: SgdState, lr_mult: dict[str, float] | None = None) -> None:
    """``v <- momentum*v + grad``; ``p <- p - lr*v``; then clear grads.

    Every registered parameter must carry a gradient.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise RuntimeError(f"sgd_step: no gradient for parameter(s) {', '.join(missing[:5])}")
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ValueError(f"sgd_step: velocity for {name} has shape {v.shape}, parameter {p.shape}")
        v *= state.momentum
        v += p.grad
        lr = state.learning_rate * (lr_mult.get(name, 1.0) if lr_mult else 1.0)
        p.data -= (lr * v).astype(p.dtype, copy=False)
        p.grad = None
