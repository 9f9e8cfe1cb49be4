"""Dense float64 tensors with tape-based reverse-mode differentiation.

Usage::

    with Tape() as tape:
        tape.watch(w)
        loss = ops.sum(ops.square(w @ x))
        grads = tape.backward(loss)
    grads[w.node_id]

A tensor only takes part in differentiation while the tape that recorded it
is active; anything else is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    # maps the output cotangent to one cotangent per input
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
    shape: tuple[int, ...] = ()


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _add(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def watch(self, *tensors: "Tensor") -> None:
        """Register tensors as differentiable leaves on this tape."""
        for t in tensors:
            t.node_id = self._add(Node("leaf", (), None, t.data.shape))
            t._tape = self

    def tracks(self, t: "Tensor") -> bool:
        return t._tape is self and t.node_id is not None

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Return d(loss)/d(leaf) for every leaf on the tape.

        Leaves the loss does not depend on get an exact zero gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        if not self.tracks(loss):
            raise TapeError("backward: loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if inp < 0 or gi is None:
                    continue
                if inp in grads:
                    grads[inp] = grads[inp] + gi
                else:
                    grads[inp] = gi
        return {
            nid: grads.get(nid, np.zeros(node.shape))
            for nid, node in enumerate(self.nodes)
            if node.kind == "leaf"
        }

    def gradient(self, loss: "Tensor", tensors: Sequence["Tensor"]) -> list[np.ndarray]:
        g = self.backward(loss)
        return [g[t.node_id] if self.tracks(t) else np.zeros_like(t.data) for t in tensors]


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: "Tensor") -> dict[int, np.ndarray]:
    tape = active_tape()
    if tape is None:
        raise TapeError("backward: no tape is active")
    return tape.backward(loss)


class Tensor:
    __slots__ = ("data", "node_id", "_tape")
    __array_priority__ = 100

    def __init__(self, data, node_id: int | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.node_id = node_id
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = out
    result.node_id = None
    result._tape = None
    tape = active_tape()
    if tape is not None:
        ids = tuple(t.node_id if tape.tracks(t) else -1 for t in inputs)
        if any(i >= 0 for i in ids):
            result.node_id = tape._add(Node(kind, ids, vjp, out.shape))
            result._tape = tape
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b),
                   lambda g: (_unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
                              _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)))


# --- elementwise unary ------------------------------------------------------

def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x, clamp: bool = True) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if clamp:
        inside = d >= LOG_FLOOR
        d = np.where(inside, d, LOG_FLOOR)
        return _record("log", np.log(d), (x,), lambda g: (np.where(inside, g / d, 0.0),))
    if np.any(d <= 0):
        raise DomainError(f"log: non-positive input (min {d.min()!r})")
    return _record("log", np.log(d), (x,), lambda g: (g / d,))


def square(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _record("square", d * d, (x,), lambda g: (2.0 * g * d,))


def clip(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    x = as_tensor(x)
    d = x.data
    inside = np.ones(d.shape, dtype=bool)
    if lo is not None:
        inside &= d >= lo
    if hi is not None:
        inside &= d <= hi
    return _record("clip", np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


# --- reductions & structure -------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def broadcast(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {tuple(shape)}") from None
    src = x.shape
    return _record("broadcast", out, (x,), lambda g: (_unbroadcast(g, src),))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(x, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in the gradient."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data[index]

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record("slice", np.array(out, dtype=np.float64), (x,), vjp)


def max_lastdim(x, keepdims: bool = False) -> Tensor:
    """Max over the last axis; ties send the gradient to the first maximiser."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=-1)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = g[..., None]
        full = np.zeros(shape)
        np.put_along_axis(full, idx[..., None], g, axis=-1)
        return (full,)

    return _record("max_lastdim", out if keepdims else out[..., 0], (x,), vjp)


def logsumexp_lastdim(x, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    d = x.data
    m = d.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(d - m).sum(axis=-1, keepdims=True)
    out = np.log(s) + m
    soft = np.exp(d - out)

    def vjp(g):
        if not keepdims:
            g = g[..., None]
        return (g * soft,)

    return _record("logsumexp_lastdim", out if keepdims else out[..., 0], (x,), vjp)


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax_lastdim", out, (x,), vjp)


def log_softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    return sub(x, logsumexp_lastdim(x, keepdims=True))


_KINDS = {
    "matmul": matmul, "add": add, "mul": mul, "sub": sub, "div": div,
    "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log, "neg": neg,
    "sum": sum, "mean": mean, "broadcast": broadcast, "concat": None,
    "slice": slice_, "softmax_lastdim": softmax_lastdim,
    "logsumexp_lastdim": logsumexp_lastdim, "max_lastdim": max_lastdim,
    "square": square, "clip": clip, "reshape": reshape, "transpose": transpose,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch an operation by name."""
    if kind not in _KINDS:
        raise ValueError(f"unknown op kind {kind!r}")
    if kind == "concat":
        return concat(inputs, **attrs)
    return _KINDS[kind](*inputs, **attrs)
