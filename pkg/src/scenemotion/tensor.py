"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: while a Graph is active (used as a context
manager), every operation whose inputs require gradients appends a record
to the tape. Graph.backward replays the tape once, in reverse recording
order, and returns a gradient table keyed by leaf tensor.

Tensors are immutable values once created. A Graph must stay on one
logical thread for its build/backward lifetime; independent Graphs may
run concurrently.
"""

from __future__ import annotations

import math

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A rank <= 4 array of float64 values, immutable by convention."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
        if arr.size == 0:
            raise ShapeError(f"zero-size tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic operators delegate to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Graph:
    """Tape of recorded operations for one forward pass.

    Nodes are stored in recording order, which is a valid topological
    order; backward visits each node exactly once in reverse. A Graph is
    single-use: after backward it cannot record or replay again.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False
        self._prev_active = None

    def __enter__(self):
        global _ACTIVE
        if self._consumed:
            raise RuntimeError("graph already consumed by backward")
        self._prev_active = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = self._prev_active
        return False

    def _append(self, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        for p in parents:
            pid = id(p)
            if p.requires_grad and pid not in self._produced and pid not in self._leaves:
                self._leaves[pid] = p
        self._records.append((out, parents, vjp))
        self._produced.add(id(out))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every requires_grad leaf seen.

        Leaves the tape never reached from `loss` get zero gradients.
        """
        if self._consumed:
            raise RuntimeError("graph already consumed by backward")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                pid = id(p)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

        table = {}
        for pid, leaf in self._leaves.items():
            g = grads.get(pid)
            table[leaf] = np.zeros_like(leaf.data) if g is None else g
        self._records.clear()
        return table


_ACTIVE: Graph | None = None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg and _ACTIVE is not None:
        _ACTIVE._append(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _emit(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _emit(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g / (2.0 * out),))


def absolute(a) -> Tensor:
    a = _wrap(a)
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = _wrap(a)
    return _emit(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def softplus(a) -> Tensor:
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return _emit(out, (a,), vjp)


def huber(a, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: quadratic inside +-delta, linear outside."""
    a = _wrap(a)
    x = a.data
    absx = np.abs(x)
    out = np.where(absx <= delta, 0.5 * x * x, delta * (absx - 0.5 * delta))

    def vjp(g):
        return (g * np.clip(x, -delta, delta),)

    return _emit(out, (a,), vjp)


def wrap_angle(a) -> Tensor:
    """Wrap values into [-pi, pi) via min + floormod(x + max, max - min).

    Derivative is 1 except at the wrap discontinuities (measure zero).
    """
    a = _wrap(a)
    out = -math.pi + np.mod(a.data + math.pi, 2.0 * math.pi)
    return _emit(out, (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _emit(np.asarray(out), (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reduce_max(a, axis: int) -> Tensor:
    """Max over one axis; gradient flows to the first maximal entry."""
    a = _wrap(a)
    out = a.data.max(axis=axis)
    idx = np.argmax(a.data, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(
            ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        return (ga,)

    return _emit(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    inv = np.argsort(axes)
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit(out, tuple(ts), vjp)


def getitem(a, idx) -> Tensor:
    """Basic indexing only (ints and slices); no fancy index arrays."""
    a = _wrap(a)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _emit(np.asarray(out), (a,), vjp)


def tile_leading(a, n: int) -> Tensor:
    """Repeat a tensor n times along a new leading axis."""
    a = _wrap(a)
    out = np.broadcast_to(a.data, (n,) + a.data.shape).copy()
    return _emit(out, (a,), lambda g: (g.sum(axis=0),))


def select_per_column(a, rows) -> Tensor:
    """From a [R, C] tensor pick entry (rows[c], c) for each column c."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.arange(a.data.shape[1])
    out = a.data[rows, cols]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[rows, cols] = g
        return (ga,)

    return _emit(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and network primitives


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading batch dims must be equal or 1."""
    a, b = _wrap(a), _wrap(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {da.shape} @ {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {da.shape} @ {db.shape}")
    for x, y in zip(da.shape[-3::-1], db.shape[-3::-1]):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"batch dimensions incompatible: {da.shape} @ {db.shape}")
    out = np.matmul(da, db)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, db.swapaxes(-1, -2)), da.shape)
        if db.ndim == 2:
            # weight-style operand: one flat GEMM instead of a broadcast
            # batch product followed by a reduction
            k = da.shape[-1]
            gb = da.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(da.swapaxes(-1, -2), g), db.shape)
        return ga, gb

    return _emit(out, (a, b), vjp)


def masked_softmax(logits, valid) -> Tensor:
    """Softmax over the last axis restricted to valid positions.

    Invalid positions get weight exactly 0. Rows with no valid entry are a
    defined case and yield all zeros.
    """
    t = _wrap(logits)
    v = np.broadcast_to(np.asarray(valid, dtype=bool), t.data.shape)
    shifted = np.where(v, t.data, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(v, np.exp(shifted - row_max), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    out = e / np.where(z > 0.0, z, 1.0)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot), None)

    return _emit(out, (t, Tensor(v.astype(np.float64))), vjp)


def log_softmax(logits) -> Tensor:
    t = _wrap(logits)
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (t,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(x.data.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes).reshape(gain.data.shape)
        dbias = g.sum(axis=reduce_axes).reshape(bias.data.shape)
        return dx, dgain, dbias

    return _emit(out, (x, gain, bias), vjp)


def timescales(num_scales: int, min_timescale: float, max_timescale: float) -> np.ndarray:
    """Geometric spacing from min to max inclusive; a single scale uses min."""
    if num_scales == 1:
        return np.array([min_timescale])
    ratio = (max_timescale / min_timescale) ** (1.0 / (num_scales - 1))
    return min_timescale * ratio ** np.arange(num_scales)


def sinusoidal_embedding(
    values, num_channels: int, min_timescale: float, max_timescale: float
) -> Tensor:
    """Embed scalars as [sin(v/t_i)..., cos(v/t_i)...] over geometric timescales."""
    if num_channels % 2 != 0 or num_channels < 2:
        raise ValueError(f"num_channels must be a positive even count, got {num_channels}")
    if not 0.0 < min_timescale < max_timescale:
        raise ValueError(
            f"need 0 < min_timescale < max_timescale, got {min_timescale}, {max_timescale}"
        )
    v = _wrap(values)
    inv = 1.0 / timescales(num_channels // 2, min_timescale, max_timescale)
    args = v.data[..., None] * inv
    out = np.concatenate([np.sin(args), np.cos(args)], axis=-1)

    def vjp(g):
        half = num_channels // 2
        gv = (g[..., :half] * np.cos(args) - g[..., half:] * np.sin(args)) * inv
        return (gv.sum(axis=-1),)

    return _emit(out, (v,), vjp)
