"""Stateful layer modules with explicit backward passes.

A module caches whatever its backward pass needs during ``forward``; only one
forward may be in flight per module instance before ``backward`` is called.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from exposnet.numerics import functional as F
from exposnet.numerics.functional import DTYPE


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(shape={self.data.shape})"


class Module:
    """Base class: tracks child modules, parameters and buffers by attribute name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad.fill(0.0)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def to_dtype(self, dtype):
        """Cast parameters and buffers in place (float64 copies serve gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for name in getattr(self, "_buffers", ()):
            setattr(self, name, getattr(self, name).astype(dtype))
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else [value]
            for child in children:
                if isinstance(child, Module):
                    child._cast_buffers(dtype)


INIT_BOUNDS = {
    # He-uniform: sqrt(6 / fan_in)
    "he_uniform": lambda fan_in: np.sqrt(6.0 / fan_in),
    # kaiming_uniform with a=sqrt(5), the usual framework default: 1 / sqrt(fan_in)
    "fan_in_uniform": lambda fan_in: 1.0 / np.sqrt(fan_in),
}


def init_weights(rng: np.random.Generator, shape, fan_in: int, scheme: str = "he_uniform"):
    limit = INIT_BOUNDS[scheme](fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, init: str = "he_uniform"):
        self.weight = Parameter(init_weights(rng, (c_out, c_in, 3, 3), c_in * 9, init))
        self.bias = Parameter(np.zeros(c_out))
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = F.conv2d_forward(x, self.weight.data, self.bias.data)
        return out

    def backward(self, dout):
        dx, dw, db = F.conv2d_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        self._cache = None
        return dx


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = F.batchnorm_forward(
            x, self.gamma.data, self.beta.data, self.running_mean, self.running_var, train)
        return out

    def backward(self, dout):
        dx, dg, db = F.batchnorm_backward(dout, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        self._cache = None
        return dx


class ReLU(Module):
    def forward(self, x, train=False):
        out, self._mask = F.relu_forward(x)
        return out

    def backward(self, dout):
        return F.relu_backward(dout, self._mask)


class Sigmoid(Module):
    def forward(self, x, train=False):
        out, self._out = F.sigmoid_forward(x)
        return out

    def backward(self, dout):
        return F.sigmoid_backward(dout, self._out)


class MaxPool2(Module):
    def forward(self, x, train=False):
        out, self._cache = F.maxpool2_forward(x)
        return out

    def backward(self, dout):
        return F.maxpool2_backward(dout, self._cache)


class BilinearResize(Module):
    def __init__(self, out_h: int, out_w: int):
        self.out_h, self.out_w = out_h, out_w

    def forward(self, x, train=False):
        out, self._cache = F.bilinear_forward(x, self.out_h, self.out_w)
        return out

    def backward(self, dout):
        return F.bilinear_backward(dout, self._cache)


class GlobalAvgPool(Module):
    def forward(self, x, train=False):
        out, self._shape = F.global_avg_pool_forward(x)
        return out

    def backward(self, dout):
        return F.global_avg_pool_backward(dout, self._shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init: str = "he_uniform"):
        self.weight = Parameter(init_weights(rng, (n_out, n_in), n_in, init))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x, train=False):
        out, self._cache = F.linear_forward(x, self.weight.data, self.bias.data)
        return out

    def backward(self, dout):
        dx, dw, db = F.linear_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Dropout(Module):
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def forward(self, x, train=False):
        out, self._mask = F.dropout_forward(x, self.rate, train, self.rng)
        return out

    def backward(self, dout):
        return F.dropout_backward(dout, self._mask)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def conv_block(c_in: int, c_out: int, rng: np.random.Generator,
               init: str = "he_uniform") -> Sequential:
    """conv 3x3 -> batch norm -> ReLU."""
    return Sequential(Conv2d(c_in, c_out, rng, init), BatchNorm2d(c_out), ReLU())


def set_dropout_rng(module: Module, rng: np.random.Generator):
    """Point every Dropout below ``module`` at a shared generator."""
    if isinstance(module, Dropout):
        module.rng = rng
    for value in vars(module).values():
        children = value if isinstance(value, (list, tuple)) else [value]
        for child in children:
            if isinstance(child, Module):
                set_dropout_rng(child, rng)
