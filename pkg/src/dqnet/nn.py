"""Parameter containers and the small set of layers the model is made of."""
from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import autograd as ag
from . import ops
from .autograd import Tensor


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator keyed by ``(seed, name)``.

    Components initialize from their own stream, so adding or removing one
    component (e.g. switching the fusion mode) leaves every other component's
    initial weights unchanged.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def param(values, dtype=ag.DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


class Module:
    """Base class: parameters are ``Tensor`` attributes with ``requires_grad``.

    Buffers (non-trainable state such as running statistics) are ``np.ndarray``
    attributes whose names are listed in ``_buffer_names``.
    """

    _buffer_names: tuple[str, ...] = ()
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield f"{name}.{key}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict:
            missing = sorted(expected - set(state))
            unexpected = sorted(set(state) - expected)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            if name in state:
                if state[name].shape != p.shape:
                    raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
                p.data = np.array(state[name], dtype=p.dtype)
        for name, b in buffers.items():
            if name in state:
                b[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place."""
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    value.data = value.data.astype(dtype)
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    @property
    def dtype(self):
        return next(iter(self.parameters())).dtype


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``[in, out]``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, init: str = "trunc_normal"):
        if init == "zeros":
            w = np.zeros((n_in, n_out))
        elif init == "kaiming":
            w = kaiming_normal(rng, (n_in, n_out), n_in)
        else:
            w = trunc_normal(rng, (n_in, n_out))
        self.weight = param(w)
        self.bias = param(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = True,
    ):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = param(kaiming_normal(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = param(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """Non-overlapping deconvolution (kernel size == stride)."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator, bias: bool = True):
        self.stride = stride
        self.weight = param(kaiming_normal(rng, (c_in, c_out, stride, stride), c_in))
        self.bias = param(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.weight, self.bias, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = ops.NORM_EPS):
        self.eps = eps
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = ops.NORM_EPS):
        self.momentum = momentum
        self.eps = eps
        self.weight = param(np.ones(channels))
        self.bias = param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=ag.DEFAULT_DTYPE)
        self.running_var = np.ones(channels, dtype=ag.DEFAULT_DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )
