"""Minimal dense-tensor reverse-mode autodiff.

Tensors wrap numpy arrays. Operations executed inside a ``Tape`` context are
recorded in order; ``backward`` replays the records strictly in reverse, which
makes gradient accumulation deterministic. Leaves with ``requires_grad`` get
their gradients accumulated (+=) into ``.grad``; call ``zero_grad`` between
backward passes if you do not want accumulation.

Training uses float32; gradient-check oracles build float64 tensors and every
op preserves the input dtype.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import DegenerateInputError, ShapeMismatchError, ContractError

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense n-dimensional float array, optionally tracked on a tape."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        # Set when an op recorded this tensor on the active tape.
        self._tracked = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; backward walks it in exact reverse."""

    _active: Optional["Tape"] = None

    def __init__(self):
        # each node: (output tensor, parent tensors, backward fn)
        self._nodes = []

    def __enter__(self):
        if Tape._active is not None:
            raise ContractError("nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._active

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Tensor):
        """Accumulate d(root)/d(leaf) into every requires_grad ancestor."""
        if root.ndim != 0:
            raise ContractError(
                f"backward root must be a scalar, got shape {root.shape}"
            )
        grads: dict[int, np.ndarray] = {
            id(root): np.ones((), dtype=root.dtype)
        }
        if root.requires_grad:
            _accumulate_leaf(root, grads[id(root)])
        for out, parents, fn in reversed(self._nodes):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            parent_grads = fn(g_out)
            for p, g in zip(parents, parent_grads):
                if g is None:
                    continue
                g = g.astype(p.dtype, copy=False)
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if p.requires_grad:
                    _accumulate_leaf(p, g)


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def backward(root: Tensor):
    """Run backward on the tape that recorded ``root``."""
    tape = Tape.active()
    if tape is None:
        raise ContractError("backward called outside a Tape context")
    tape.backward(root)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _record(out: Tensor, parents: Sequence[Tensor], fn) -> Tensor:
    tape = Tape.active()
    if tape is not None and any(p.requires_grad or p._tracked for p in parents):
        out._tracked = True
        tape._nodes.append((out, tuple(parents), fn))
    return out


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.dtype for t in tensors))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(data)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatchError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(data)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(data)

    def fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _record(out, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.dtype))

    def fn(g):
        return (g * c,)

    return _record(out, (a,), fn)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    out = Tensor(data)

    def fn(g):
        return (g * data,)

    return _record(out, (a,), fn)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def fn(g):
        return (g / a.data,)

    return _record(out, (a,), fn)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record(out, (a,), fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeMismatchError(f"matmul: inputs must be at least 1-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))

    def fn(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = _unbroadcast(np.matmul(g, bt), a.shape)
        gb = _unbroadcast(np.matmul(at, g), b.shape)
        return ga, gb

    return _record(out, (a, b), fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def fn(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))

    def fn(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), fn)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Index the leading axis with an integer array of any shape."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ContractError("gather_rows indices must be integers")
    out = Tensor(a.data[idx])

    def fn(g):
        ga = np.zeros_like(a.data)
        if idx.ndim == 0:
            ga[idx] = g  # single row: no duplicate indices possible
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), fn)


# ---------------------------------------------------------------------------
# reductions and normalizations


def sum_(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), fn)


def mean_pool(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape) / n,)

    return _record(out, (a,), fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)
    sm = np.exp(y)

    def fn(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), fn)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis, then apply the affine pair."""
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeMismatchError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {a.shape[-1]}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def fn(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return dx, dgamma, dbeta

    return _record(out, (a, gamma, beta), fn)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm < 1e-8):
        raise DegenerateInputError("l2_normalize: zero-norm input")
    y = x / norm
    out = Tensor(y)

    def fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return _record(out, (a,), fn)


def assert_finite(a: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(a.data)):
        raise ContractError(f"{what} contains non-finite values")
