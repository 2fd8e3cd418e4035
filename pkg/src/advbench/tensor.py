"""Dense float tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and touching at least one
tensor with ``requires_grad=True``, are appended to that tape.  Calling
:func:`backward` replays the tape in reverse and returns a gradient for every
differentiable leaf.  Without an active tape nothing is recorded.

Only scalar-with-tensor broadcasting is implicit; anything else has to go
through :func:`broadcast_to`.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, GradientError, ShapeError

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable dense array.  Float inputs keep their dtype, everything else becomes float32."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only supported by a python scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.  Single owner, use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def apply_op(value: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``value`` as the output of an op and record it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


class Gradients:
    """Mapping from leaf tensors (by identity) to gradient arrays."""

    def __init__(self):
        self._items: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _set(self, t: Tensor, g: np.ndarray) -> None:
        self._items[id(t)] = (t, g)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        try:
            return self._items[id(t)][1]
        except KeyError:
            raise KeyError(f"no gradient recorded for {t!r}") from None

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._items

    def __len__(self) -> int:
        return len(self._items)

    def leaves(self) -> list[Tensor]:
        return [t for t, _ in self._items.values()]


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
    """Gradients of scalar ``loss`` w.r.t. every differentiable leaf on ``tape``.

    With ``wrt`` given, only those leaves are returned; leaves the loss does not
    depend on get zeros.  The tape is left untouched, so repeated calls give
    identical results.
    """
    if loss.data.size != 1:
        raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(n.out): i for i, n in enumerate(tape.nodes)}
    if id(loss) not in produced:
        raise GradientError("loss was not produced by an operation recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: produced[id(loss)] + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        g = np.asarray(g, dtype=node.out.dtype)
        for inp, contrib in zip(node.inputs, node.backward(g)):
            if contrib is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key].astype(np.float64, copy=False) + contrib
            else:
                grads[key] = contrib

    if wrt is None:
        seen: set[int] = set()
        targets = []
        for node in tape.nodes:
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in produced and id(inp) not in seen:
                    seen.add(id(inp))
                    targets.append(inp)
    else:
        targets = list(wrt)

    result = Gradients()
    for t in targets:
        if not t.requires_grad:
            raise GradientError(f"{t!r} is not flagged as requiring gradients")
        g = grads.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        result._set(t, np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return result


# ---------------------------------------------------------------------------
# elementwise


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ; use broadcast_to explicitly")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # scalar operand: collapse with 64-bit accumulation
    return np.asarray(np.sum(g, dtype=np.float64)).astype(g.dtype).reshape(shape)


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return apply_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return apply_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return apply_op(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum propagates NaN, so a diverged layer stays visible downstream
    return apply_op(np.maximum(a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


def _logistic(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _logistic(x)

    def bw(g):
        return (g * (s * (1 + x * (1 - s))),)

    return apply_op(x * s, (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return apply_op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return apply_op(np.log(x), (a,), lambda g: (g / x,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "relu": relu, "silu": silu,
    "exp": exp, "log": log, "neg": neg, "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("relu", t)`` or ``elementwise("scale", t, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return apply_op(ad @ bd, (a, b), bw)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` for a (m, k) and b (n, k), as used by dense layers storing (out, in) weights."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt: incompatible shapes {a.shape} and {b.shape}.T")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd if a.requires_grad else None, g.T @ ad if b.requires_grad else None)

    return apply_op(ad @ bd.T, (a, b), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return apply_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return apply_op(a.data.T, (a,), lambda g: (g.T,))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the backward rule sums over expanded axes."""
    shape = tuple(shape)
    src = a.shape
    if len(src) != len(shape) or any(s != 1 and s != d for s, d in zip(src, shape)):
        raise ShapeError(f"cannot broadcast {src} to {shape}")
    axes = tuple(i for i, (s, d) in enumerate(zip(src, shape)) if s == 1 and d != 1)

    def bw(g):
        if not axes:
            return (g,)
        return (np.sum(g, axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype),)

    return apply_op(np.broadcast_to(a.data, shape), (a,), bw)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]`` for a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: tensor {a.shape} with index {index.shape}")
    if index.min() < 0 or index.max() >= a.shape[1]:
        raise DomainError("pick: index out of range")
    rows = np.arange(a.shape[0])
    src = a.shape

    def bw(g):
        out = np.zeros(src, dtype=g.dtype)
        out[rows, index] = g
        return (out,)

    return apply_op(a.data[rows, index], (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(a: Tensor, axis) -> int | None:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    axis = _norm_axis(a, axis)
    src = a.shape
    out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return apply_op(out, (a,), bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    axis = _norm_axis(a, axis)
    n = a.data.size if axis is None else a.shape[axis]
    src = a.shape
    out = (np.sum(a.data, axis=axis, dtype=np.float64) / n).astype(a.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / a.dtype.type(n), src).copy(),)

    return apply_op(out, (a,), bw)


def max(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Maximum; the gradient goes to the first (lowest-index) maximiser only."""
    axis = _norm_axis(a, axis)
    src = a.shape
    if axis is None:
        flat = int(np.argmax(a.data))

        def bw_all(g):
            out = np.zeros(a.data.size, dtype=g.dtype)
            out[flat] = g.reshape(())
            return (out.reshape(src),)

        return apply_op(a.data.reshape(-1)[flat], (a,), bw_all)

    arg = np.argmax(a.data, axis=axis)
    values = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        out = np.zeros(src, dtype=g.dtype)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return apply_op(values, (a,), bw)


_REDUCTIONS = {"sum": sum, "mean": mean, "max": max}


def reduce(op: str, a: Tensor, axis: int | None = None) -> Tensor:
    try:
        fn = _REDUCTIONS[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return fn(a, axis)
