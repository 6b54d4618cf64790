"""Reverse-mode automatic differentiation over dense numpy arrays.

An :class:`Array` wraps an ndarray plus an optional gradient tape entry.
Operations build the tape only when some input requires a gradient, so
forward passes through frozen parameters cost nothing extra. ``backward``
walks the tape once in reverse topological order.

Every operation validates shapes up front (raising :class:`ShapeError` with
both shapes in the message) and checks its result for NaN/Inf (raising
:class:`NumericError`).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _as_data(value) -> np.ndarray:
    a = np.asarray(value)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return a


class Array:
    """A dense real array with an optional reverse-mode gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _vjp: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = _as_data(data)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("non-finite values in array")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Array":
        return Array(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed needs a scalar, got {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed shape {grad.shape} vs value {self.data.shape}")

        # Iterative topological sort; recursion depth would scale with tape
        # length otherwise.
        topo: list[Array] = []
        seen: set[int] = set()
        stack: list[tuple[Array, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        _accum(self, grad)
        for node in reversed(topo):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # Operator sugar over the module-level primitives.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        if isinstance(other, Array):
            raise TypeError("division only supported by constants")
        return mul(self, constant(1.0 / float(other)))

    def __neg__(self):
        return mul(self, constant(-1.0))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __repr__(self):
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Array:
    return Array(value)


def _coerce(value) -> Array:
    return value if isinstance(value, Array) else Array(value)


def _accum(node: Array, g: np.ndarray) -> None:
    if not (node.requires_grad or node._vjp is not None):
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=node.data.dtype, copy=True)
    else:
        node.grad = node.grad + g


def _tracked(*parents: Array) -> bool:
    return any(p.requires_grad or p._vjp is not None for p in parents)


def _make(data: np.ndarray, parents: tuple, vjp) -> Array:
    if _tracked(*parents):
        return Array(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Array(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcastable(a: tuple, b: tuple) -> bool:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            return False
    return True


# ---------------------------------------------------------------------------
# Elementwise and linear primitives
# ---------------------------------------------------------------------------

def add(a: Array, b: Array) -> Array:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")
    out_data = a.data + b.data

    def vjp(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), vjp)


def sub(a: Array, b: Array) -> Array:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}")
    out_data = a.data - b.data

    def vjp(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), vjp)


def mul(a: Array, b: Array) -> Array:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")
    out_data = a.data * b.data

    def vjp(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), vjp)


def matmul(a: Array, b: Array) -> Array:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    out_data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), vjp)


def affine(x: Array, w: Array, b: Array) -> Array:
    """x @ w + b."""
    return add(matmul(x, w), b)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Array) -> Array:
    """Tanh-form GELU with its exact analytic derivative."""
    # In-place arithmetic: this sits in every FFN, so temporaries matter.
    xd = x.data
    x2 = xd * xd
    u = _GELU_A * x2
    u += 1.0
    u *= xd
    u *= _GELU_C
    t = np.tanh(u, out=u)  # tanh(C * (x + A x^3))
    out_data = 1.0 + t
    out_data *= xd
    out_data *= 0.5

    def vjp(g):
        # 0.5 * (1 + t) + 0.5 * x * (1 - t^2) * C * (1 + 3A x^2)
        dx = t * t
        np.subtract(1.0, dx, out=dx)
        dx *= xd
        dx *= _GELU_C
        w = (3.0 * _GELU_A) * x2
        w += 1.0
        dx *= w
        dx += t
        dx += 1.0
        dx *= 0.5
        dx *= g
        _accum(x, dx)

    return _make(out_data, (x,), vjp)


def softmax(x: Array, axis: int = -1) -> Array:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - dot))

    return _make(s, (x,), vjp)


def layer_norm(x: Array, eps: float = 1e-5) -> Array:
    """Normalize the last axis to zero mean, unit variance (no scale/shift)."""
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"layer_norm needs a non-empty last axis, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - y * gy))

    return _make(y, (x,), vjp)


# ---------------------------------------------------------------------------
# Shape and indexing primitives
# ---------------------------------------------------------------------------

def reshape(x: Array, shape: Sequence[int]) -> Array:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def vjp(g):
        _accum(x, g.reshape(x.shape))

    return _make(out_data, (x,), vjp)


def transpose(x: Array, axes: Sequence[int]) -> Array:
    axes = tuple(axes)
    out_data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        _accum(x, g.transpose(inverse))

    return _make(out_data, (x,), vjp)


def broadcast_to(x: Array, shape: Sequence[int]) -> Array:
    shape = tuple(shape)
    if not _broadcastable(x.shape, shape):
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    out_data = np.broadcast_to(x.data, shape).copy()

    def vjp(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _make(out_data, (x,), vjp)


def gather(x: Array, indices: np.ndarray) -> Array:
    """Rows of x selected along axis 0; output shape indices.shape + x.shape[1:]."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(x.shape) < 1:
        raise ShapeError("gather needs at least 1-D input")
    out_data = np.take(x.data, idx, axis=0)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        _accum(x, gx)

    return _make(out_data, (x,), vjp)


def batched_gather(x: Array, indices: np.ndarray) -> Array:
    """x: (B, N, ...), indices: (B, M) -> (B, M, ...), row-wise selection."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim < 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(
            f"batched_gather: input {x.shape} incompatible with indices {idx.shape}"
        )
    rows = np.arange(x.shape[0])[:, None]
    out_data = x.data[rows, idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        _accum(x, gx)

    return _make(out_data, (x,), vjp)


def concat(arrays: Sequence[Array], axis: int = 0) -> Array:
    if not arrays:
        raise ShapeError("concat of zero arrays")
    out_data = np.concatenate([a.data for a in arrays], axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for a, lo, hi in zip(arrays, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(a, g[tuple(sl)])

    return _make(out_data, tuple(arrays), vjp)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_axis(x: Array, axis: int) -> Array:
    out_data = x.data.sum(axis=axis)

    def vjp(g):
        _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(out_data, (x,), vjp)


def sum_all(x: Array) -> Array:
    out_data = np.asarray(x.data.sum())

    def vjp(g):
        _accum(x, np.broadcast_to(g, x.shape).astype(x.data.dtype))

    return _make(out_data, (x,), vjp)


def mean_pool(x: Array, axis: int) -> Array:
    n = x.shape[axis]
    out_data = x.data.mean(axis=axis)

    def vjp(g):
        _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape) / n)

    return _make(out_data, (x,), vjp)


def mse(a: Array, b: Array) -> Array:
    """Mean of squared differences over all elements (scalar)."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = max(diff.size, 1)
    out_data = np.asarray((diff**2).sum() / n)

    def vjp(g):
        scale = 2.0 * g / n
        _accum(a, scale * diff)
        _accum(b, -scale * diff)

    return _make(out_data, (a, b), vjp)


def cosine_rows(a: Array, b: Array, eps: float = 1e-8) -> Array:
    """Cosine similarity along the last axis; denominator guarded by eps."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_rows: shapes {a.shape} and {b.shape} differ")
    na2 = (a.data**2).sum(axis=-1, keepdims=True)
    nb2 = (b.data**2).sum(axis=-1, keepdims=True)
    na = np.sqrt(na2)
    nb = np.sqrt(nb2)
    raw = na * nb
    denom = np.maximum(raw, eps)
    s = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = s / denom
    out_data = cos[..., 0]

    def vjp(g):
        ge = g[..., None]
        # Where the guard clamps, the denominator is constant wrt inputs.
        live = (raw > eps).astype(a.data.dtype)
        inv_na2 = np.where(na2 > 0, 1.0 / np.maximum(na2, 1e-300), 0.0)
        inv_nb2 = np.where(nb2 > 0, 1.0 / np.maximum(nb2, 1e-300), 0.0)
        ga = ge * (b.data / denom - live * cos * a.data * inv_na2)
        gb = ge * (a.data / denom - live * cos * b.data * inv_nb2)
        _accum(a, ga)
        _accum(b, gb)

    return _make(out_data, (a, b), vjp)


def softmax_cross_entropy(logits: Array, labels: np.ndarray) -> Array:
    """Mean negative log-likelihood of integer labels under row softmax."""
    y = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {y.shape}"
        )
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    out_data = np.asarray(-logp[np.arange(n), y].mean())

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        _accum(logits, g * p / n)

    return _make(out_data, (logits,), vjp)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(
    fn: Callable[[Array], Array],
    point: np.ndarray,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The relative error denominator is max(|analytic|, |numeric|, 1e-8) per
    coordinate. ``max_coords`` caps the number of probed coordinates (a
    seeded random subset) for expensive functions.
    """
    base = np.asarray(point, dtype=np.float64)
    x = Array(base.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got {out.shape}")
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        rng = np.random.default_rng(seed)
        coords = rng.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    aflat = analytic.reshape(-1)
    for i in coords:
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = fn(Array(xp.reshape(base.shape))).item()
        fm = fn(Array(xm.reshape(base.shape))).item()
        numeric = (fp - fm) / (2.0 * h)
        a = float(aflat[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
