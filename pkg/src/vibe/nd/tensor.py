"""Reverse-mode differentiable n-d arrays backed by numpy.

A :class:`Tensor` wraps a float32/float64 ``ndarray``.  Every primitive that
produces a tensor from inputs requiring gradients records a :class:`Node`
holding the inputs and the adjoint rule.  :func:`backward` linearises the
reachable graph into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()
_checks = {"finite": True}


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that stops graph recording on the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def set_finite_checks(enabled: bool) -> None:
    """Toggle the post-op NaN/inf scan (on by default)."""
    _checks["finite"] = bool(enabled)


class Node:
    """One recorded primitive: op name, input tensors and adjoint rule.

    ``backward`` maps the output gradient to a tuple with one entry per
    input (``None`` where no gradient flows).
    """

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward = backward


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A float array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "_retain", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name
        self._retain = False

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep ``.grad`` on this non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms of the core ops ------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def astype(self, dtype):
        return astype(self, dtype)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants; scalars adopt ``like``'s dtype so float32 graphs stay float32."""
    if isinstance(value, Tensor):
        return value
    if like is not None and np.ndim(value) == 0:
        return Tensor(np.asarray(value, dtype=like.dtype))
    if like is not None and isinstance(value, np.ndarray) and value.dtype not in FLOAT_DTYPES:
        return Tensor(value.astype(like.dtype))
    return Tensor(value)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
    """Build an op output, recording a node when any input needs gradients."""
    if _checks["finite"] and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._retain = False
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out.node = Node(op, inputs, adjoint) if needs else None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
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


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise binary ops

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, "add", (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, "sub", (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, "mul", (a, b), adjoint)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def adjoint(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, "div", (a, b), adjoint)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# Elementwise unary ops

def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, "neg", (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, "exp", (x,), lambda g: (g * out,))


def expm1(x: Tensor) -> Tensor:
    """``exp(x) - 1`` without cancellation near zero."""
    out = np.expm1(x.data)
    return make_result(out, "expm1", (x,), lambda g: (g * (out + 1.0),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise NumericError("log of non-positive value")
    return make_result(np.log(xd), "log", (x,), lambda g: (g / xd,))


def power(x: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("power supports scalar exponents only")
    xd = x.data
    p = float(exponent)
    return make_result(xd ** p, "pow", (x,), lambda g: (g * p * xd ** (p - 1.0),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return make_result(np.abs(x.data), "abs", (x,), lambda g: (g * sign,))


def clamp(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip into ``[lo, hi]``; gradient is zero where clipping was active."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        inside &= xd >= lo
    if hi is not None:
        inside &= xd <= hi
    return make_result(out, "clamp", (x,), lambda g: (g * inside,))


def astype(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if x.dtype == dtype:
        return x
    src = x.dtype
    return make_result(x.data.astype(dtype), "astype", (x,), lambda g: (g.astype(src),))


# ---------------------------------------------------------------------------
# Linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                # fold every leading axis into rows: avoids a batch of outer products
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, "matmul", (a, b), adjoint)


# ---------------------------------------------------------------------------
# Shape ops

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return make_result(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), "transpose", (x,),
                       lambda g: (g.transpose(inverse),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return make_result(out, "broadcast_to", (x,), lambda g: (unbroadcast(g, src),))


def getitem(x: Tensor, index) -> Tensor:
    src, dtype = x.shape, x.dtype
    out = x.data[index]
    advanced = _is_advanced(index)

    def adjoint(g):
        full = np.zeros(src, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(np.array(out, copy=True) if np.ndim(out) else np.asarray(out),
                       "getitem", (x,), adjoint)


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


# ---------------------------------------------------------------------------
# Reductions

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def adjoint(g):
        return (np.broadcast_to(np.reshape(g, kept), src),)

    return make_result(np.asarray(out), "sum", (x,), adjoint)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    dtype = x.dtype

    def adjoint(g):
        return (np.broadcast_to(np.reshape(g, kept) / dtype.type(count), src),)

    return make_result(np.asarray(out), "mean", (x,), adjoint)


# ---------------------------------------------------------------------------
# Backward traversal

class Tape:
    """Topologically ordered record of the nodes reachable from ``output``.

    ``entries`` lists tensors inputs-first; backward walks it in reverse so
    every tensor is visited exactly once, after all of its consumers.
    """

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in reversed(t.node.inputs):
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        self.entries = order

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Tensor]:
        return reversed(self.entries)

    def nodes(self) -> list[Node]:
        return [t.node for t in self.entries if t.node is not None]


def backward(loss: Tensor, grad=None) -> Tape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf.

    Repeated calls add to existing gradients; call ``zero_grad`` to reset.
    Returns the tape that was replayed.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones(loss.shape, dtype=loss.dtype)
    else:
        seed = np.asarray(grad, dtype=loss.dtype)
        if seed.shape != loss.shape:
            raise DimensionError(f"seed gradient shape {seed.shape} != output shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    tape = Tape(loss)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for t in tape:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.node is None or t._retain:
            _accumulate(t, g)
        if t.node is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = pending.get(key)
            pending[key] = pg if prev is None else prev + pg
    return tape


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
