"""Dense float64 tensors with a reverse-mode autodiff tape.

Every op produces a new :class:`Tensor`. When any input requires a gradient
the result records its parents and a closure mapping the output gradient to
input gradients. Node ids are drawn from a global monotone counter, so
sorting reachable nodes by id gives a valid reverse topological order.

Broadcasting is deliberately absent except between a tensor and a Python
scalar; use :func:`expand` to tile a size-1 axis explicitly.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_ids = itertools.count()

# Kink recorder: when active, piecewise ops append a signature of which
# branch each element took. grad_check uses it to reject finite-difference
# probes that straddle a non-differentiable point.
_kink_log: list[bytes] | None = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an op receives input outside its mathematical domain."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _record_kink(mask: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask.reshape(-1)).tobytes())


@contextmanager
def record_kinks():
    """Collect branch signatures of piecewise ops evaluated inside the block."""
    global _kink_log
    prev = _kink_log
    log: list[bytes] = []
    _kink_log = log
    try:
        yield log
    finally:
        _kink_log = prev


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def matmul(a, b) -> Tensor:
    """Matrix product of rank-2 operands, or batched product of rank-3 operands
    sharing the leading batch dimension."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks for shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.data.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 2:
            return (g @ bd.T if a.requires_grad else None,
                    ad.T @ g if b.requires_grad else None)
        return (g @ bd.transpose(0, 2, 1) if a.requires_grad else None,
                ad.transpose(0, 2, 1) @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), backward, "matmul")


# ----------------------------------------------------------------- unary ops

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    _record_kink(mask)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to keep exp() from overflowing
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        bad = a.data[a.data <= 0].reshape(-1)[0]
        raise DomainError(f"log: non-positive input (e.g. {bad!r})")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    _record_kink(s > 0)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is passed only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    _record_kink(inside)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


_UNARY = {
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "log": log,
    "square": square, "exp": exp, "sqrt": sqrt, "abs": absolute, "neg": neg,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch an elementwise op by name, e.g. ``elementwise("relu", x)``."""
    if kind in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{kind} takes one argument")
        return _UNARY[kind](args[0])
    if kind in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{kind} takes two arguments")
        return _BINARY[kind](*args)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), backward, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def reduce(kind: str, t, axis: int | None = None) -> Tensor:
    if kind == "sum":
        return sum(t, axis)
    if kind == "mean":
        return mean(t, axis)
    raise ValueError(f"unknown reduction {kind!r}")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim)
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


# ------------------------------------------------------------ shape plumbing

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    nd = parts[0].data.ndim
    axis = _norm_axis(axis, nd)
    for p in parts[1:]:
        other = [d for i, d in enumerate(p.shape) if i != axis]
        first = [d for i, d in enumerate(parts[0].shape) if i != axis]
        if p.data.ndim != nd or other != first:
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def expand(a, shape: Sequence[int]) -> Tensor:
    """Explicitly tile size-1 axes of ``a`` up to ``shape`` (same rank)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if len(shape) != a.data.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (np.sum(g, axis=axes, keepdims=True),), "expand")


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with the bias tiled explicitly over the batch rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    y = matmul(x, w)
    return add(y, expand(reshape(b, (1, b.shape[-1])), y.shape))


# ------------------------------------------------------------------ backward

def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a gradient array for every entry of ``params`` (zeros when the
    parameter is not reachable from the loss). With ``params=None`` the
    gradients of all reachable named leaves are returned.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss] if loss.requires_grad else []
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        order.append(node)
        stack.extend(p for p in node._parents if p.requires_grad and p._id not in seen)
    order.sort(key=lambda n: n._id, reverse=True)

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss._id] = np.ones_like(loss.data)
    leaves: dict[int, Tensor] = {}
    for node in order:
        g = grads.pop(node._id, None) if node._backward is not None else grads.get(node._id)
        if node._backward is None:
            leaves[node._id] = node
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg

    if params is None:
        params = {n.name: n for n in leaves.values() if n.name is not None}
    out: dict[str, np.ndarray] = {}
    handed_out: set[int] = set()
    for name, t in params.items():
        g = grads.get(t._id)
        if g is None:
            g = np.zeros_like(t.data)
        elif id(g) in handed_out or not g.flags.writeable:
            # pass-through ops can route one array (or a broadcast view) to several leaves
            g = g.copy()
        handed_out.add(id(g))
        out[name] = g
    return out


class Graph:
    """Parameter registry for one forward/backward pass.

    ``param`` registers a trainable named leaf, ``const`` wraps a value that
    no gradient should reach.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    @staticmethod
    def const(value) -> Tensor:
        return Tensor(value)

    def leaves(self, store: Mapping[str, np.ndarray], trainable: Iterable[str] | bool = True) -> dict[str, Tensor]:
        """Wrap a whole name->array store; names whose prefix appears in
        ``trainable`` (or all, when ``True``) become trainable leaves."""
        out = {}
        for name, value in store.items():
            if trainable is True or (trainable is not False and any(name.startswith(p) for p in trainable)):
                out[name] = self.param(name, value)
            else:
                out[name] = Tensor(value, name=name)
        return out

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(loss, self.params)
