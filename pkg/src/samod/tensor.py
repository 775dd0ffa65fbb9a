"""Dense float64 tensors with reverse-mode automatic differentiation.

All math in this package runs through the ops here. Conventions:

* storage is row-major contiguous float64; transposes/reshapes are explicit
* the batch dimension, when present, is leftmost; feature maps are
  (batch, channels, height, width), flattened location views are
  (..., channels, locations)
* every differentiable op records onto a process-global dynamic tape that
  is rebuilt each forward pass and consumed by :func:`backward`
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "active_tape",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "conv2d",
    "batch_norm2d",
    "embedding",
    "softmax_cross_entropy",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "swap_last2",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


# Debug switch: verify every op output stays finite. Enabled by the test
# suite; off by default because it touches every output array.
CHECK_FINITE = False


class _Entry:
    __slots__ = ("out", "inputs", "fn", "name")

    def __init__(self, out, inputs, fn, name):
        self.out = out
        self.inputs = inputs
        self.fn = fn
        self.name = name


class Tape:
    """Execution-ordered record of one forward pass.

    Entries are appended as ops execute, so every entry's inputs were
    created before the entry itself (leaf tensors or earlier outputs).
    ``backward`` replays entries in reverse, applying each at most once,
    then clears the tape.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        # Diagnostics from the most recent backward pass.
        self.last_recorded = 0
        self.last_applied = 0

    def record(self, out, inputs, fn, name):
        self.entries.append(_Entry(out, inputs, fn, name))

    def clear(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    ``grad`` is populated by :func:`backward` for every tensor with
    ``requires_grad`` reachable from the loss; gradients accumulate
    additively across multiple uses of the same tensor.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, _as_tensor(1.0 / float(other)))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # -- method forms ----------------------------------------------------
    def matmul(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return tmean(self, axis=axis)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out: Tensor, inputs: tuple, fn, name: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{name}: non-finite values in output")
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.record(out, inputs, fn, name)
    return out


def _accum(t: Tensor, g: np.ndarray):
    assert g.shape == t.data.shape, f"gradient shape {g.shape} != data shape {t.data.shape}"
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Propagate d(loss)/d(tensor) to every requires_grad tensor on the tape.

    ``loss`` must be a scalar. Consumes (clears) the active tape; leaf
    gradients survive, intermediate gradients are dropped.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = _tape
    loss.grad = np.ones_like(loss.data)
    applied = 0
    for entry in reversed(tape.entries):
        g = entry.out.grad
        if g is None:
            continue
        entry.fn(g)
        applied += 1
    tape.last_recorded = len(tape.entries)
    tape.last_applied = applied
    for entry in tape.entries:
        entry.out.grad = None
    tape.entries.clear()


# ----------------------------------------------------------------------
# elementwise / arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), fn, "mul")


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def fn(g):
        if a.requires_grad:
            _accum(a, -g)

    return _record(out, (a,), fn, "neg")


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def fn(g):
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return _record(out, (x,), fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def fn(g):
        if x.requires_grad:
            _accum(x, g * y * (1.0 - y))

    return _record(out, (x,), fn, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)

    def fn(g):
        if x.requires_grad:
            _accum(x, g * (1.0 - y * y))

    return _record(out, (x,), fn, "tanh")


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D operands multiply normally; higher-rank operands
    multiply over the last two axes with numpy broadcasting of the leading
    (batch) dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def fn(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), fn, "matmul")


def softmax(x: Tensor, axis: int) -> Tensor:
    """Exponentials normalized along ``axis`` with the max-subtraction trick."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.data.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def fn(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, (g - dot) * y)

    return _record(out, (x,), fn, "softmax")


# ----------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def fn(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _record(out, (x,), fn, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))

    def fn(g):
        if x.requires_grad:
            inv = None if axes is None else np.argsort(axes)
            _accum(x, np.transpose(g, inv))

    return _record(out, (x,), fn, "transpose")


def swap_last2(x: Tensor) -> Tensor:
    """Transpose the last two axes (batch dims untouched)."""
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def _getitem(x: Tensor, idx) -> Tensor:
    out = Tensor(np.array(x.data[idx]))

    def fn(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[idx] += g

    return _record(out, (x,), fn, "slice")


# ----------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def fn(g):
        if not x.requires_grad:
            return
        if axis is None or keepdims:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _record(out, (x,), fn, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.data.mean(axis=axis))
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]

    def fn(g):
        if not x.requires_grad:
            return
        gg = g / count
        if axis is None:
            _accum(x, np.broadcast_to(gg, x.data.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(gg, axis), x.data.shape).copy())

    return _record(out, (x,), fn, "mean")


# ----------------------------------------------------------------------
# neural-net kernels


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) of ``x`` with kernels ``w``.

    ``x`` is (batch, in_channels, H, W) or a single (in_channels, H, W)
    example; ``w`` is (out_channels, in_channels, kh, kw). Output extents
    are floor((extent + 2*pad - kernel) / stride) + 1 and must be positive
    integers: a kernel that does not fit in the padded input is an error.
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 3 or 4, got {x.data.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {w.data.shape}")
    bsz, cin, h, wd = xd.shape
    cout, cin2, kh, kw = w.data.shape
    if cin != cin2:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {cin2}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad stride/pad ({stride}, {pad})")
    span_h = h + 2 * pad - kh
    span_w = wd + 2 * pad - kw
    if span_h < 0 or span_w < 0:
        raise ShapeError(
            f"conv2d: output extent not a positive integer for input {x.data.shape}, "
            f"kernel {w.data.shape}, stride {stride}, pad {pad}"
        )
    ho = span_h // stride + 1
    wo = span_w // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(bsz, cin, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    cols = windows.reshape(bsz, cin * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out_d = np.matmul(wmat, cols).reshape(bsz, cout, ho, wo)
    out = Tensor(out_d[0] if single else out_d)

    def fn(g):
        gd = g[None] if single else g
        gr = gd.reshape(bsz, cout, ho * wo)
        if w.requires_grad:
            gw = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gr).reshape(bsz, cin, kh, kw, ho, wo)
            gxp = np.zeros((bsz, cin, h + 2 * pad, wd + 2 * pad))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            _accum(x, gx[0] if single else gx)

    return _record(out, (x, w), fn, "conv2d")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (batch, H, W).

    Training mode normalizes with batch statistics and folds them into the
    running buffers (kept fraction ``momentum``); eval mode normalizes with
    the running statistics only.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"batch_norm2d input must be rank 4, got {xd.shape}")
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xc = xd - mu[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    out = Tensor(xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None])
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def fn(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx_hat = g * gamma.data[None, :, None, None]
            if training:
                dvar = (gx_hat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv**3
                dmu = -(gx_hat.sum(axis=(0, 2, 3))) * inv + dvar * (-2.0 / m) * xc.sum(axis=(0, 2, 3))
                gx = (
                    gx_hat * inv[None, :, None, None]
                    + (2.0 / m) * dvar[None, :, None, None] * xc
                    + dmu[None, :, None, None] / m
                )
            else:
                gx = gx_hat * inv[None, :, None, None]
            _accum(x, gx)

    return _record(out, (x, gamma, beta), fn, "batch_norm2d")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back to the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding: token id out of range [0, {table.data.shape[0]}) in lookup"
        )
    out = Tensor(table.data[ids])

    def fn(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))

    return _record(out, (table,), fn, "embedding")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (batch, classes) logits, got {ld.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    bsz = ld.shape[0]
    if labels.shape != (bsz,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= ld.shape[1]):
        raise IndexError("softmax_cross_entropy: label out of range")
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(-logp[np.arange(bsz), labels].mean())
    probs = np.exp(logp)

    def fn(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(bsz), labels] -= 1.0
            _accum(logits, d * (float(g) / bsz))

    return _record(out, (logits,), fn, "softmax_cross_entropy")
