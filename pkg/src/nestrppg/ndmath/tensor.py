"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds its output eagerly and, when gradients are enabled and some
input requires them, records a closure mapping the output cotangent to the
input cotangents.  ``Tensor.backward`` walks the recorded graph in reverse
topological order.  Only leaf tensors keep ``.grad`` after a backward pass.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        # a finite sum implies finite entries; only scan on overflow or NaN
        if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value produced by {op or 'constructor'}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = _parents
        self._backward: Callable | None = _backward
        self.op = op

    # --- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # --- autodiff -------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # --- operators ------------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return tmin(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return tabs(self)

    def relu(self):
        return relu(self)


def _topological_order(root: Tensor) -> list[Tensor]:
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


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    mask = out == ad
    return _make(out, (a,), lambda g: (g * mask,), "clamp")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)), "where")


# --- reductions ----------------------------------------------------------

def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.size(out), 1)
    return _make(out, (a,), lambda g: (_expand(g / count, shape, axis, keepdims).copy(),), "mean")


def _extreme(a: Tensor, axis, keepdims, fn, argfn, op):
    ad = a.data
    out = fn(ad, axis=axis, keepdims=keepdims)

    def backward(g):
        grad = np.zeros_like(ad)
        if axis is None:
            grad.flat[argfn(ad)] = g
            return (grad,)
        idx = np.expand_dims(argfn(ad, axis=axis), axis)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, idx, gk, axis=axis)
        return (grad,)

    if axis is not None and not isinstance(axis, int):
        raise ShapeError(f"{op} supports a single axis")
    return _make(out, (a,), backward, op)


def tmax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry."""
    return _extreme(a, axis, keepdims, np.max, np.argmax, "max")


def tmin(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return _extreme(a, axis, keepdims, np.min, np.argmin, "min")


def logsumexp(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """``log(sum(exp(a) * mask))`` along ``axis``, shifted for stability."""
    shift = a.data.max(axis=axis, keepdims=True)
    e = exp(a - shift)
    if mask is not None:
        e = e * np.asarray(mask, dtype=np.float64)
    return log(tsum(e, axis=axis)) + np.squeeze(shift, axis=axis)


# --- shape ---------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic(idx)

    def backward(g):
        grad = np.zeros(shape)
        if basic:        # views never repeat an element, so plain assignment is the adjoint
            grad[idx] = g
        else:
            np.add.at(grad, idx, g)
        return (grad,)

    return _make(a.data[idx], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# --- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul needs at least 1-D operands")
    ad, bd = a.data, b.data

    def backward(g):
        A = ad[None, :] if ad.ndim == 1 else ad
        B = bd[:, None] if bd.ndim == 1 else bd
        G = g
        if ad.ndim == 1:
            G = np.expand_dims(G, -2)
        if bd.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(G @ np.swapaxes(B, -1, -2), A.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(A, -1, -2) @ G, B.shape).reshape(bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")
