"""Dense float64 tensors with reverse-mode differentiation.

Only the handful of row-oriented operations needed by the Q-Former and the
toy language model are provided.  Every op checks its output for NaN/Inf and
raises instead of propagating poisoned values.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "NotScalar",
    "DetachedTensor",
    "NonFiniteValue",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "sum_all",
    "softmax_rows",
    "rms_norm_rows",
    "gelu",
    "take_rows",
    "concat_rows",
    "slice_rows",
    "cross_entropy_rows",
    "backward",
    "topological_order",
    "no_grad",
    "numerical_grad",
    "finite_diff_check",
]


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class DetachedTensor(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"non-finite value produced by {op}")
    return arr


class Tensor:
    """A float64 array node in the computation graph.

    ``data`` is treated as immutable; optimizers rebind it to a new array.
    ``grad`` is only populated on leaves created with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        self.data = _check_finite(arr, op)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    return out


# --------------------------------------------------------------------------
# Operations.  Each backward closure maps the output gradient to a tuple of
# parent gradients (None where a parent does not need one).
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.dims} x {b.dims}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), bw, "matmul")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row broadcast over ``a``'s rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def bw(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        def bw(g):
            return g, (g.sum(axis=0) if b.requires_grad else None)
    else:
        raise ShapeMismatch(f"add {a.dims} + {b.dims}")
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub {a.dims} - {b.dims}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul {a.dims} * {b.dims}")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose of {a.dims}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max subtraction.

    ``mask`` (bool, same shape) marks admissible entries; excluded entries get
    probability exactly zero.  Every row must admit at least one entry.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatch(f"softmax_rows expects a matrix, got {x.dims}")
    z = x.data
    if mask is not None:
        if mask.shape != z.shape:
            raise ShapeMismatch(f"mask {mask.shape} vs {z.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("softmax row with every entry masked")
        row_max = np.where(mask, z, -np.inf).max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, z - row_max, 0.0)), 0.0)
    else:
        e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax_rows")


def rms_norm_rows(x, eps: float = 1e-6) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    d = X.shape[1]
    r = np.sqrt((X * X).mean(axis=1, keepdims=True) + eps)
    y = X / r

    def bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True) / d) / r,)

    return _make(y, (x,), bw, "rms_norm_rows")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU (smooth, so finite differences behave)."""
    x = _as_tensor(x)
    X = x.data
    x2 = X * X  # X ** 3 goes through the slow generic pow path
    u = _GELU_C * X * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    y = 0.5 * X * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du),)

    return _make(y, (x,), bw, "gelu")


def take_rows(table, ids: Sequence[int]) -> Tensor:
    """Gather rows (embedding lookup); repeated ids accumulate in backward."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), bw, "take_rows")


def concat_rows(parts: Iterable) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat_rows of nothing")
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeMismatch(f"concat_rows width mismatch: {p.dims} vs {width}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, bw, "concat_rows")


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop].copy(), (x,), bw, "slice_rows")


def cross_entropy_rows(logits, targets: Sequence[int]) -> Tensor:
    """Per-row negative log-likelihood ``-log softmax(logits)[row, target]``."""
    logits = _as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or tgt.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy_rows {logits.dims} vs {tgt.shape}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(len(tgt))
    nll = lse - z[rows, tgt]
    p = np.exp(z - lse[:, None])

    def bw(g):
        d = p.copy()
        d[rows, tgt] -= 1.0
        return (d * g[:, None],)

    return _make(nll, (logits,), bw, "cross_entropy_rows")


# --------------------------------------------------------------------------
# Reverse pass
# --------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, inputs before the ops that consume them."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got dims {loss.dims}")
    if not loss.requires_grad:
        raise DetachedTensor("loss does not depend on any requires_grad tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (mutates then restores ``x.data``)."""
    base = x.data
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    for i in range(base.size):
        plus = base.copy()
        plus.reshape(-1)[i] += h
        minus = base.copy()
        minus.reshape(-1)[i] -= h
        x.data = plus
        fp = float(f(x).data)
        x.data = minus
        fm = float(f(x).data)
        flat[i] = (fp - fm) / (2.0 * h)
    x.data = base
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      analytic: np.ndarray | None = None) -> float:
    """Max relative error between the analytic and central-difference gradient.

    ``analytic`` overrides the backward-pass gradient (used for negative
    controls).  Error per coordinate is ``|a - n| / (|a| + 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if analytic is None:
        x.requires_grad = True
        x.grad = None
        backward(f(x))
        analytic = x.grad
        x.grad = None
    numeric = numerical_grad(f, x, h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
