"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (if any) whenever
at least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import special

_local = threading.local()


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of primitive ops for one backward pass.

    Single-owner: a tape must not be shared across threads.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        out._node = len(self.nodes)
        self.nodes.append((out, parents, fn))


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


class Tensor:
    """A float64 array plus an optional handle into the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: int | None = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._node is not None

    # -- operator sugar ----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._node = None
    out.name = None
    tape = active_tape()
    if tape is not None and any(p.tracked for p in parents):
        tape.record(out, tuple(parents), fn)
    return out


def _check_finite_input(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{op}: non-finite input")


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    ta, tb = a.tracked, b.tracked

    def back(g):
        return (unbroadcast(g * bd, ad.shape) if ta else None,
                unbroadcast(g * ad, bd.shape) if tb else None)

    return _make(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: zero divisor")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    ta, tb = a.tracked, b.tracked

    def back(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if ta else None
        gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if tb else None
        return ga, gb

    return _make(out, (a, b), back)


# -- elementwise unary -------------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive argument")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: negative argument")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def softplus_array(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    e = np.exp(-np.abs(ad))
    out = np.maximum(ad, 0.0) + np.log1p(e)

    def back(g):
        r = 1.0 / (1.0 + e)
        return (g * np.where(ad >= 0, r, e * r),)

    return _make(out, (a,), back)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(special.lgamma(ad), (a,), lambda g: (g * special.digamma(ad),))


def digamma(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(special.digamma(ad), (a,), lambda g: (g * special.trigamma(ad),))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def stop_gradient(a) -> Tensor:
    """Same values, no tape edge: gradients never pass through."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


# -- reductions and shape ops ---------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def take(a, idx) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with add.at."""
    a = as_tensor(a)
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(a.data[idx]), (a,), back)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(ts), back)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


# -- reverse pass --------------------------------------------------------------
def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every leaf that requires grad.

    Leaves also get their ``.grad`` attribute set (overwritten, not summed).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}

    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return {loss: loss.grad}
        return {}
    if loss._node >= len(tape.nodes) or tape.nodes[loss._node][0] is not loss:
        raise ValueError("backward: loss was not produced on this tape")

    grads[id(loss)] = np.ones_like(loss.data)
    for k in range(loss._node, -1, -1):
        out, parents, fn = tape.nodes[k]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = fn(g)
        for p, pg in zip(parents, pgrads):
            if not p.tracked:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p.requires_grad and p._node is None:
                leaves[key] = p

    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        result[leaf] = leaf.grad
    return result
