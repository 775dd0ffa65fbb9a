"""Parameter registration, seeded initialization, and common layers."""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always participates in gradient computation."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Initializer:
    """Deterministic per-parameter weight initialization.

    Each parameter draws from its own generator seeded by (global seed,
    crc32 of the parameter's scope name), so adding or removing sibling
    modules never shifts anyone else's initial values.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def rng_for(self, name: str) -> np.random.Generator:
        return np.random.default_rng([zlib.crc32(name.encode()), self.seed])

    def he_uniform(self, name: str, shape, fan_in: int) -> np.ndarray:
        limit = np.sqrt(6.0 / fan_in)
        return self.rng_for(name).uniform(-limit, limit, size=shape)

    def uniform(self, name: str, shape, low: float, high: float) -> np.ndarray:
        return self.rng_for(name).uniform(low, high, size=shape)

    @staticmethod
    def zeros(shape) -> np.ndarray:
        return np.zeros(shape)


class Module:
    """Minimal layer base: ordered parameter/buffer/child registration.

    Assigning a :class:`Parameter` or :class:`Module` attribute registers it
    automatically; plain numpy buffers (e.g. running statistics) go through
    :meth:`register_buffer`. Registration order defines checkpoint order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    # ------------------------------------------------------------------
    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map on the last axis: y = x @ w (+ b)."""

    def __init__(self, in_dim: int, out_dim: int, *, bias: bool = True, init: Initializer, scope: str):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = Parameter(init.he_uniform(scope + ".w", (in_dim, out_dim), fan_in=in_dim))
        self.b = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class Conv2d(Module):
    """Conv layer owning a (out, in, kh, kw) kernel; no bias."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        *,
        stride: int = 1,
        pad: int = 0,
        init: Initializer,
        scope: str,
    ):
        super().__init__()
        self.stride = stride
        self.pad = pad
        fan_in = in_channels * kernel * kernel
        self.w = Parameter(
            init.he_uniform(scope + ".w", (out_channels, in_channels, kernel, kernel), fan_in=fan_in)
        )

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    """Per-channel batchnorm; train mode tracks running statistics."""

    def __init__(self, channels: int, *, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
