"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op computes its result with numpy and, when any input
requires a gradient, appends a node to the active :class:`Tape`.  Calling
:func:`backward` on a scalar walks the tape once in reverse and stores
``d loss / d t`` in ``t.grad`` for every reachable tensor that requires grad.

Elementwise ops never broadcast implicitly; use :func:`expand` or
:func:`broadcast_rows` to make shapes agree.  ``matmul`` follows numpy's
batched semantics (a shared 2-D right operand is allowed).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed ops.

    Nodes are appended as ops run, so inputs always precede the node that
    consumes them.  The tape keeps its tensors alive until :meth:`clear`.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        self.nodes.append(Node(inputs, output, backward))

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = t
        for key, t in owners.items():
            t.grad = grads[key]


_tape = Tape()
_grad_enabled = True


def get_tape() -> Tape:
    return _tape


def clear_tape() -> None:
    _tape.clear()


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them; results never require grad."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss`` (overwriting)."""
    _tape.backward(loss)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: int | None = None) -> Tensor:
        return sum_(self, axis)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data: np.ndarray, inputs: Iterable[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    Other modules use this to define fused ops such as cross-entropy.
    """
    inputs = tuple(inputs)
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, req)
    if req:
        _tape.record(inputs, out, backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul: only the right operand may be shared, got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, _sum_to(gb, bd.shape)

    return record_op(ad @ bd, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op(x.data * c, (x,), lambda g: (g * c,))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return record_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return record_op(x.data.sum(axis=ax), (x,), back)


def mean(x: Tensor) -> Tensor:
    return scale(sum_(x), 1.0 / x.size)


# ------------------------------------------------------------- shape helpers

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return record_op(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 dims, got {x.shape}")
    return record_op(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {src} to {shape}") from exc
    return record_op(out, (x,), lambda g: (_sum_to(g, src),))


def broadcast_rows(x: Tensor, k: int) -> Tensor:
    """Repeat a row vector ``k`` times: ``x 1_k^T`` laid out as rows."""
    n = x.shape[-1]
    if x.ndim == 1:
        x = reshape(x, (1, n))
    elif x.shape[-2] != 1:
        raise ShapeError(f"broadcast_rows expects a single row, got {x.shape}")
    return expand(x, x.shape[:-2] + (k, n))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record_op(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    idx = (slice(None),) * ax + (slice(start, stop),)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return record_op(x.data[idx], (x,), back)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, indices.reshape(-1), np.moveaxis(g, ax, 0).reshape((-1,) + moved.shape[1:]))
        return (out,)

    return record_op(np.take(x.data, indices, axis=ax), (x,), back)


# -------------------------------------------------------------- nonlinearity

def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op(y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record_op(y, (x,), back)


def power_norm(x: Tensor) -> Tensor:
    """Signed square root, ``sign(x) * sqrt(|x|)``; gradient 0 at x == 0."""
    r = np.sqrt(np.abs(x.data))
    y = np.sign(x.data) * r

    def back(g):
        with np.errstate(divide="ignore"):
            d = np.where(r > 0, 0.5 / np.where(r > 0, r, 1.0), 0.0)
        return (g * d,)

    return record_op(y, (x,), back)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale each slice along ``axis`` to unit norm; slices with norm <= eps pass through."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    ok = n > eps
    safe = np.where(ok, n, 1.0)
    y = np.where(ok, x.data / safe, x.data)

    def back(g):
        proj = y * (g * y).sum(axis=axis, keepdims=True)
        return (np.where(ok, (g - proj) / safe, g),)

    return record_op(y, (x,), back)
