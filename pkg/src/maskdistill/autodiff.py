"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable value is a Tensor wrapping an ndarray; ops record
parent links plus a backward closure, and Tensor.backward() replays the
tape in reverse topological order. Ops are deliberately coarse (fused
layer_norm, batch_norm, softmax, conv2d) so a full training step stays
a few hundred graph nodes and the heavy lifting lives in BLAS.

Dtype follows the input arrays: float32 for training speed, float64 for
finite-difference gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy import special as _sp

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher forwards, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)  # keeps numpy scalar dtypes (e.g. float64 sums)
            if data.dtype.kind != "f":
                data = data.astype(np.float32)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division unsupported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- backward pass -------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into .grad of leaves."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad or t._backward is not None:
        t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to its source shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):  # tensor + scalar/array constant
        a = as_tensor(a)
        data = a.data + b

        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))

        return _make(data, (a,), bwd)
    if not isinstance(a, Tensor):
        return add(b, a)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor) and isinstance(a, Tensor):
        data = a.data - b.data

        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))

        return _make(data, (a, b), bwd)
    if isinstance(a, Tensor):  # tensor - const
        data = a.data - b

        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))

        return _make(data, (a,), bwd)
    b = as_tensor(b)  # const - tensor
    data = a - b.data

    def bwd(g):
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (b,), bwd)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        data = a.data * b

        def bwd(g):
            _accum(a, _unbroadcast(g * b, a.data.shape))

        return _make(data, (a,), bwd)
    if not isinstance(a, Tensor):
        return mul(b, a)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def bwd(g):
        if b.data.ndim == 2:
            # common linear-layer case: flatten leading dims for one GEMM
            ga = g @ b.data.T
            _accum(a, ga.reshape(a.data.shape))
            g2 = g.reshape(-1, g.shape[-1])
            a2 = a.data.reshape(-1, a.data.shape[-1])
            _accum(b, a2.T @ g2)
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(a, _unbroadcast(ga, a.data.shape))
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bwd)


# -- shape ops ----------------------------------------------------------------


def reshape(t: Tensor, shape) -> Tensor:
    src = t.data.shape
    data = t.data.reshape(shape)

    def bwd(g):
        _accum(t, g.reshape(src))

    return _make(data, (t,), bwd)


def swapaxes(t: Tensor, a: int, b: int) -> Tensor:
    data = np.swapaxes(t.data, a, b)

    def bwd(g):
        _accum(t, np.swapaxes(g, a, b))

    return _make(data, (t,), bwd)


def transpose(t: Tensor, axes) -> Tensor:
    data = np.transpose(t.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(t, np.transpose(g, inv))

    return _make(data, (t,), bwd)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)


def getitem(t: Tensor, idx) -> Tensor:
    data = t.data[idx]
    basic = _is_basic_index(idx)

    def bwd(g):
        full = np.zeros_like(t.data)
        if basic:  # views never overlap, plain += is exact and fast
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(t, full)

    return _make(data, (t,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(data, tensors, bwd)


def broadcast_rows(t: Tensor, n: int) -> Tensor:
    """Tile a [1, ...] tensor to [n, ...] (class-token expansion)."""
    data = np.broadcast_to(t.data, (n,) + t.data.shape[1:]).copy()

    def bwd(g):
        _accum(t, g.sum(axis=0, keepdims=True))

    return _make(data, (t,), bwd)


# -- reductions & pointwise ----------------------------------------------------


def tsum(t: Tensor, axis=None, keepdims=False) -> Tensor:
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(t, np.broadcast_to(g, t.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(t, np.broadcast_to(g, t.data.shape).copy())

    return _make(data, (t,), bwd)


def tmean(t: Tensor, axis=None, keepdims=False) -> Tensor:
    n = t.data.size if axis is None else np.prod(
        [t.data.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(t, axis=axis, keepdims=keepdims), 1.0 / float(n))


def tabs(t: Tensor) -> Tensor:
    data = np.abs(t.data)
    sign = np.sign(t.data)

    def bwd(g):
        _accum(t, g * sign)

    return _make(data, (t,), bwd)


def texp(t: Tensor) -> Tensor:
    data = np.exp(t.data)

    def bwd(g):
        _accum(t, g * data)

    return _make(data, (t,), bwd)


def tlog(t: Tensor) -> Tensor:
    data = np.log(t.data)

    def bwd(g):
        _accum(t, g / t.data)

    return _make(data, (t,), bwd)


def tpow(t: Tensor, p: float) -> Tensor:
    data = t.data ** p

    def bwd(g):
        _accum(t, g * p * t.data ** (p - 1.0))

    return _make(data, (t,), bwd)


def relu(t: Tensor) -> Tensor:
    data = np.maximum(t.data, 0.0)

    def bwd(g):
        _accum(t, g * (t.data > 0))

    return _make(data, (t,), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + _sp.erf(t.data * _INV_SQRT2))
    data = t.data * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * t.data * t.data) * _INV_SQRT2PI
        _accum(t, g * (cdf + t.data * pdf))

    return _make(data, (t,), bwd)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(t, data * (g - dot))

    return _make(data, (t,), bwd)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def bwd(g):
        _accum(t, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _make(data, (t,), bwd)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale/shift."""
    mu = t.data.mean(axis=-1, keepdims=True)
    var = t.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (t.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        _accum(beta, _unbroadcast(g, beta.data.shape))
        _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        dxh = g * gamma.data
        m1 = dxh.mean(axis=-1, keepdims=True)
        m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
        _accum(t, (dxh - m1 - xhat * m2) * inv)

    return _make(data, (t, gamma, beta), bwd)


def batch_norm(
    t: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: dict,
    update_stats: bool,
    use_batch_stats: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """BatchNorm over (B,) for 2-d input or (B,H,W) for 4-d input.

    `running` holds {'mean','var'} numpy buffers, mutated in place only
    when `update_stats` is true; normalization uses batch statistics when
    `use_batch_stats`, otherwise the running buffers.
    """
    if t.data.ndim == 2:
        axes, pshape = (0,), (1, -1)
    elif t.data.ndim == 4:
        axes, pshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ValueError(f"batch_norm expects 2-d or 4-d input, got {t.data.ndim}-d")

    if use_batch_stats:
        mu = t.data.mean(axis=axes)
        var = t.data.var(axis=axes)
    else:
        mu, var = running["mean"], running["var"]
    if update_stats:
        running["mean"] = ((1.0 - momentum) * running["mean"] + momentum * mu).astype(
            running["mean"].dtype)
        running["var"] = ((1.0 - momentum) * running["var"] + momentum * var).astype(
            running["var"].dtype)

    inv = (1.0 / np.sqrt(var + eps)).reshape(pshape)
    xhat = (t.data - mu.reshape(pshape)) * inv
    data = xhat * gamma.data.reshape(pshape) + beta.data.reshape(pshape)
    count = t.data.size // t.data.shape[1]

    def bwd(g):
        _accum(beta, g.sum(axis=axes))
        _accum(gamma, (g * xhat).sum(axis=axes))
        dxh = g * gamma.data.reshape(pshape)
        if use_batch_stats:
            s1 = dxh.sum(axis=axes, keepdims=True)
            s2 = (dxh * xhat).sum(axis=axes, keepdims=True)
            _accum(t, (dxh - s1 / count - xhat * s2 / count) * inv)
        else:
            _accum(t, dxh * inv)

    return _make(data, (t, gamma, beta), bwd)


# -- conv / upsampling ----------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 2-d convolution via im2col; x is [B,C,H,W], w is [O,C,kh,kw]."""
    B, C, H, W = x.data.shape
    O, _, kh, kw = w.data.shape
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = cols @ wmat.T + b.data
    data = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        _accum(b, g2.sum(axis=0))
        _accum(w, (g2.T @ cols).reshape(w.data.shape))
        gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + Ho, j:j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        _accum(x, gxp)

    return _make(data, (x, w, b), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of [B,C,H,W]."""
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        B, C, H2, W2 = g.shape
        _accum(x, g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)))

    return _make(data, (x,), bwd)


# -- parameter utilities ---------------------------------------------------------


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def zero_grads(params) -> None:
    for t in params.values() if isinstance(params, dict) else params:
        t.grad = None


def global_grad_norm(params) -> float:
    sq = 0.0
    for t in params.values() if isinstance(params, dict) else params:
        if t.grad is not None:
            sq += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(sq)
