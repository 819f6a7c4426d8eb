"""Minimal dense-array engine with reverse-mode differentiation.

Arrays wrap float64 numpy buffers and are treated as immutable. Operations
executed while a Tape is active are recorded in evaluation order;
``Tape.backward`` walks the records in reverse exactly once and accumulates
gradients in a dict keyed by array identity. Only the operations needed by
the segmentation losses and the small network are provided.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

# Probabilities entering logarithms are clamped to this range so KL terms
# stay finite and differentiable.
PROB_EPS = 1e-7

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Array:
    """A dense float64 array, optionally tracked for gradients."""

    def __init__(self, data, requires_grad: bool = False, _checked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked and not np.all(np.isfinite(arr)):
            raise ValueError("Array holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Array(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations below
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def moveaxis(self, src, dst):
        return moveaxis(self, src, dst)


class Tape:
    """Gradient tape for one forward evaluation.

    Use as a context manager; arithmetic on Arrays inside the block is
    recorded when any input requires a gradient. A tape is confined to a
    single execution context; independent tapes on other threads do not
    interact.
    """

    def __init__(self):
        self._records: list[tuple[Array, Callable]] = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, root: Array) -> None:
        """Accumulate d(root)/d(x) for every tracked x reachable from root."""
        if root.data.size != 1:
            raise ValueError("backward root must be a scalar")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for out, backward_fn in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in backward_fn(g):
                cur = grads.get(id(inp))
                grads[id(inp)] = gi if cur is None else cur + gi
        self.grads = grads

    def grad(self, arr: Array) -> np.ndarray | None:
        return self.grads.get(id(arr))


def _coerce(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def _record(inputs: Sequence[Array], out_data: np.ndarray, backward_fn) -> Array:
    tape = _active_tape()
    tracked = tape is not None and any(a.requires_grad for a in inputs)
    out = Array(out_data, requires_grad=tracked, _checked=True)
    if tracked:
        tape._records.append((out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that broadcasting introduced or stretched."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g, b.data.shape)))
        return out

    return _record((a, b), a.data + b.data, backward)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(-g, b.data.shape)))
        return out

    return _record((a, b), a.data - b.data, backward)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.data, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.data, b.data.shape)))
        return out

    return _record((a, b), a.data * b.data, backward)


def div(a, b):
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g / b.data, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))
        return out

    return _record((a, b), a.data / b.data, backward)


def neg(a):
    a = _coerce(a)

    def backward(g):
        return [(a, -g)] if a.requires_grad else []

    return _record((a,), -a.data, backward)


def power(a, p):
    a = _coerce(a)
    p = float(p)

    def backward(g):
        return [(a, g * p * a.data ** (p - 1.0))] if a.requires_grad else []

    return _record((a,), a.data ** p, backward)


def exp(a):
    a = _coerce(a)
    out_data = np.exp(a.data)

    def backward(g):
        return [(a, g * out_data)] if a.requires_grad else []

    return _record((a,), out_data, backward)


def log(a):
    a = _coerce(a)

    def backward(g):
        return [(a, g / a.data)] if a.requires_grad else []

    return _record((a,), np.log(a.data), backward)


def tanh(a):
    a = _coerce(a)
    out_data = np.tanh(a.data)

    def backward(g):
        return [(a, g * (1.0 - out_data * out_data))] if a.requires_grad else []

    return _record((a,), out_data, backward)


def relu(a):
    a = _coerce(a)

    def backward(g):
        return [(a, g * (a.data > 0))] if a.requires_grad else []

    return _record((a,), np.maximum(a.data, 0.0), backward)


def clip(a, lo: float, hi: float):
    a = _coerce(a)

    def backward(g):
        if not a.requires_grad:
            return []
        inside = (a.data >= lo) & (a.data <= hi)
        return [(a, g * inside)]

    return _record((a,), np.clip(a.data, lo, hi), backward)


def sum_(a, axis=None, keepdims=False):
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return []
        if axis is None:
            return [(a, np.broadcast_to(g, a.data.shape).copy())]
        gk = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gk, a.data.shape).copy())]

    return _record((a,), out_data, backward)


def mean(a, axis=None, keepdims=False):
    a = _coerce(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if not a.requires_grad:
            return []
        if axis is None:
            return [(a, np.broadcast_to(g / n, a.data.shape).copy())]
        gk = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gk / n, a.data.shape).copy())]

    return _record((a,), out_data, backward)


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, g @ b.data.T))
        if b.requires_grad:
            out.append((b, a.data.T @ g))
        return out

    return _record((a, b), a.data @ b.data, backward)


def reshape(a, shape):
    a = _coerce(a)

    def backward(g):
        return [(a, g.reshape(a.data.shape))] if a.requires_grad else []

    return _record((a,), a.data.reshape(shape), backward)


def moveaxis(a, src, dst):
    a = _coerce(a)

    def backward(g):
        return [(a, np.moveaxis(g, dst, src))] if a.requires_grad else []

    return _record((a,), np.moveaxis(a.data, src, dst), backward)


def pad_zero(a, pad_width):
    """Zero-pad along every axis; pad_width as in np.pad."""
    a = _coerce(a)
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.data.shape))

    def backward(g):
        return [(a, g[sl])] if a.requires_grad else []

    return _record((a,), np.pad(a.data, pad_width), backward)


def take_flat(a, idx: np.ndarray):
    """Gather entries of the flattened array at integer indices idx."""
    a = _coerce(a)
    idx = np.asarray(idx)
    out_data = np.take(a.data.ravel(), idx)

    def backward(g):
        if not a.requires_grad:
            return []
        acc = np.bincount(idx.ravel(), weights=g.ravel(), minlength=a.data.size)
        return [(a, acc.reshape(a.data.shape))]

    return _record((a,), out_data, backward)


def softmax(a, axis: int):
    """Shift-invariant softmax along one axis; slices sum to 1."""
    a = _coerce(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"axis {axis} invalid for shape {a.data.shape}")
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax input holds non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if not a.requires_grad:
            return []
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return [(a, out_data * (g - dot))]

    return _record((a,), out_data, backward)


def bernoulli_kl(p, q):
    """Per-channel KL between Bernoulli(p) and Bernoulli(q), elementwise.

    Both sides are clamped to [PROB_EPS, 1 - PROB_EPS] before the
    logarithms, so the result is finite and nonnegative for any
    probabilities.
    """
    p, q = _coerce(p), _coerce(q)
    if p.data.shape != q.data.shape and p.data.ndim > 0 and q.data.ndim > 0:
        raise ValueError(f"shape mismatch {p.data.shape} vs {q.data.shape}")
    pc = clip(p, PROB_EPS, 1.0 - PROB_EPS)
    qc = clip(q, PROB_EPS, 1.0 - PROB_EPS)
    one_m_p = 1.0 - pc
    one_m_q = 1.0 - qc
    return pc * (log(pc) - log(qc)) + one_m_p * (log(one_m_p) - log(one_m_q))


def cosine_similarity(u, v):
    """Cosine of the angle between two equal-length vectors, in [-1, 1].

    An all-zero vector on either side yields 0 (no directional evidence).
    """
    u, v = _coerce(u), _coerce(v)
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ValueError("cosine_similarity expects 1-D vectors")
    if u.data.shape != v.data.shape:
        raise ValueError(f"length mismatch {u.data.shape[0]} vs {v.data.shape[0]}")
    if not u.data.any() or not v.data.any():
        return Array(0.0)
    dot = (u * v).sum()
    nu = (u * u).sum() ** 0.5
    nv = (v * v).sum() ** 0.5
    return clip(dot / (nu * nv), -1.0, 1.0)


def finite_diff_check(f, x: Array, eps: float = 1e-5) -> float:
    """Compare analytic gradients of f at x with central differences.

    Returns the max over coordinates of
    |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = Array(x.data.copy(), requires_grad=True, _checked=True)
    with Tape() as tape:
        y = f(base)
    if y.data.size != 1:
        raise ValueError("f must return a scalar")
    if not np.isfinite(y.data):
        raise ValueError("f evaluated to a non-finite value")
    tape.backward(y)
    analytic = tape.grad(base)
    if analytic is None:
        analytic = np.zeros_like(base.data)

    worst = 0.0
    flat = x.data.ravel()
    for i in range(flat.size):
        hi = x.data.copy()
        hi.ravel()[i] += eps
        lo = x.data.copy()
        lo.ravel()[i] -= eps
        f_hi = f(Array(hi, _checked=True)).item()
        f_lo = f(Array(lo, _checked=True)).item()
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise ValueError("f evaluated to a non-finite value")
        numeric = (f_hi - f_lo) / (2.0 * eps)
        err = abs(analytic.ravel()[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
