"""Parameter containers: a minimal ``Module`` tree with dotted parameter names."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .autodiff import Tensor


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, scale: float = 1.0) -> Tensor:
    return parameter(rng.standard_normal(shape) * (scale * math.sqrt(2.0 / fan_in)))


class Module:
    """Base class; parameters and children are discovered from attributes.

    Attribute insertion order defines parameter order, which in turn fixes
    checkpoint layout and optimizer iteration order.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _named(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            yield from _modules(value)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    """Convolution parameters: ``weight`` [out, in, kh, kw], ``bias`` [out]."""

    def __init__(self, rng, in_ch, out_ch, kernel=3, stride=1, padding=None, bias=True, init_scale=1.0):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, init_scale)
        self.bias = parameter(np.zeros(out_ch)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Transposed convolution; ``weight`` is [in, out, kh, kw]."""

    def __init__(self, rng, in_ch, out_ch, kernel=2, stride=2, padding=0, bias=True):
        self.stride = stride
        self.padding = padding
        # each output pixel of a stride == kernel deconv sees exactly in_ch inputs
        fan_in = in_ch * max(1, (kernel // stride) ** 2)
        self.weight = parameter(rng.standard_normal((in_ch, out_ch, kernel, kernel)) / math.sqrt(fan_in))
        self.bias = parameter(np.zeros(out_ch)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, in_features, out_features, bias=True, init_scale=1.0):
        std = init_scale / math.sqrt(in_features)
        self.weight = parameter(rng.standard_normal((in_features, out_features)) * std)
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.shift, self.eps)


def _named(value, name: str) -> Iterator[tuple[str, Tensor]]:
    # nested lists/tuples are walked recursively (backbone stages are lists of blocks)
    if isinstance(value, Tensor) and value.requires_grad:
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _named(item, f"{name}.{i}")


def _modules(value) -> Iterator[Module]:
    if isinstance(value, Module):
        yield from value.modules()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _modules(item)
