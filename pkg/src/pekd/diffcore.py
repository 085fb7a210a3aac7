"""Reverse-mode automatic differentiation over dense float64 arrays.

Every model and loss computation in the package is expressed with the
operations below, so any gradient can be checked against finite differences.

Recording is explicit: operations append to the active :class:`Tape` only
inside a ``with tape:`` block, and only when at least one input needs a
gradient. Outside a tape (evaluation mode) nothing is recorded.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


class ShapeError(ValueError):
    pass


class NumericalError(ValueError):
    """A NaN or infinity reached an operation that cannot absorb it."""


class Tensor:
    """Dense real array with an optional gradient buffer.

    Leaf tensors marked ``trainable`` accumulate gradients into ``grad``.
    Tensors produced by operations carry ``requires_grad`` when they depend on
    a trainable leaf, but never own a ``grad`` buffer.
    """

    __slots__ = ("data", "trainable", "grad", "requires_grad", "is_leaf")

    def __init__(self, data, trainable: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.trainable = bool(trainable)
        self.grad: np.ndarray | None = None
        self.requires_grad = self.trainable
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def set_trainable(self, flag: bool) -> None:
        if not self.is_leaf:
            raise ValueError("only leaf tensors can change trainability")
        self.trainable = bool(flag)
        self.requires_grad = self.trainable
        if not flag:
            self.grad = None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("division only by python scalars")

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Nodes are stored in execution order, which is a topological order of the
    graph; :func:`backward` walks them in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise RuntimeError("a tape is already active in this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.out))

    def holds(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def clear(self) -> None:
        self.nodes.clear()
        self._outputs.clear()


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _emit(value: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(value)
    out.is_leaf = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(_Node(out, parents, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every trainable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or active_tape()
    if tape is None or not tape.holds(loss):
        if loss.is_leaf and loss.trainable:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise RuntimeError("loss was not recorded on a tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                if parent.trainable:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# ----------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand (a weight matrix) is applied to every row of ``a``.
    """
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} has {a.shape[-1]} columns, "
            f"{b.shape} has {b.shape[-2]} rows"
        )
    A, B = a.data, b.data
    out = A @ B

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        if b.requires_grad:
            if B.ndim == 2:
                k, n = B.shape
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _emit(out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _emit(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    A, B = a.data, b.data
    out = A * B

    def back(g):
        return (
            _unbroadcast(g * B, A.shape) if a.requires_grad else None,
            _unbroadcast(g * A, B.shape) if b.requires_grad else None,
        )

    return _emit(out, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        return (g * d,)

    return _emit(out, (x,), back)


def _check_finite(v: np.ndarray, op: str) -> None:
    if not np.isfinite(v).all():
        raise NumericalError(f"{op}: non-finite value in input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(p, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm params must have shape ({width},)")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    out = xhat * G + bias.data

    def back(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, width).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, width).sum(axis=0)
        if x.requires_grad:
            gh = g * G
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _emit(out, (x, gain, bias), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for t, p in zip(tensors, parts))

    return _emit(out, tensors, back)


def embed(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; output shape is ``ids.shape + (width,)``."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit(out, (table,), back)


def gather_rows(x: Tensor, index) -> Tensor:
    """Pick ``x[b, index[b]]`` from a (batch, seq, width) tensor."""
    index = np.asarray(index)
    batch = np.arange(x.shape[0])
    out = x.data[batch, index]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gx[batch, index] = g
        return (gx,)

    return _emit(out, (x,), back)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gx[sl] = g
        return (gx,)

    return _emit(x.data[sl], (x,), back)


def take(x: Tensor, index, axis: int = -1) -> Tensor:
    """``x`` indexed along ``axis`` by one integer per leading row (for label picks)."""
    index = np.asarray(index)
    vals = np.take_along_axis(x.data, np.expand_dims(index, axis), axis=axis)
    out = np.squeeze(vals, axis=axis)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, np.expand_dims(index, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit(out, (x,), back)


# ----------------------------------------------------------------------------
# validation


def finite_difference_check(
    f: Callable[[], Tensor],
    x: Tensor | Iterable[Tensor],
    h: float = 1e-3,
) -> float:
    """Largest relative disagreement between reverse-mode and numeric gradients.

    ``f`` takes no arguments and reads the tensors in ``x`` (which must be
    trainable). Numeric gradients use the fourth-order central stencil
    ``(f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h``; the error per element is
    ``|g_ad - g_fd| / (|g_fd| + 1e-8)``.
    """
    if not 1e-5 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-5, 1e-3]")
    params = [x] if isinstance(x, Tensor) else list(x)
    for p in params:
        if not p.trainable:
            raise ValueError("finite_difference_check needs trainable tensors")
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if loss.requires_grad:
            backward(loss, tape)
    tape.clear()

    def value() -> float:
        return float(f().data.reshape(()))

    worst = 0.0
    for p in params:
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            samples = []
            for step in (-2, -1, 1, 2):
                flat[i] = orig + step * h
                samples.append(value())
            flat[i] = orig
            fd = (samples[0] - 8 * samples[1] + 8 * samples[2] - samples[3]) / (12 * h)
            err = abs(g_ad.reshape(-1)[i] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
    return worst
