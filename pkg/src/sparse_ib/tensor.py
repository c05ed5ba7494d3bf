"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations record nodes on the active :class:`Tape` whenever any input
requires a gradient.  ``backward`` walks the tape once, newest node first.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import sparse

MAX_RANK = 3


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeError(TensorError, ValueError):
    pass


class NumericError(TensorError, FloatingPointError):
    pass


class TapeError(TensorError, RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK} (shape {arr.shape})")
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    __array_priority__ = 100

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

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, so inputs always precede the
    nodes that consume them.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward() already called on this tape; call reset() first")
        if not loss.requires_grad:
            raise TapeError("loss is not connected to any tensor that requires grad")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    inp.grad = inp.grad + gi

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)


_DEFAULT_TAPE = Tape()
_TAPES: list[Tape] = []


def current_tape() -> Tape:
    return _TAPES[-1] if _TAPES else _DEFAULT_TAPE


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    (tape or current_tape()).backward(loss)


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Evaluate without recording, even for tensors that require grad."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


_RECORDING = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NumericError(f"{op} produced non-finite values (input shapes {shapes})")
    needs = _RECORDING and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if out_data.ndim > MAX_RANK:
        raise ShapeError(f"{op} output rank {out_data.ndim} exceeds {MAX_RANK}")
    if needs:
        current_tape().record(Node(op, inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    with np.errstate(all="ignore"):
        out = a.data + b.data
    return _finish("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    with np.errstate(all="ignore"):
        out = a.data - b.data
    return _finish("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    with np.errstate(all="ignore"):
        out = a.data * b.data
    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _finish("mul", out, (a, b), bw)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    with np.errstate(all="ignore"):
        out = a.data * c
    return _finish("scalar_mul", out, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    flat = b.ndim == 2  # (..., n, k) @ (k, m) runs as one 2-D product
    with np.errstate(all="ignore"):
        if flat:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, b.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _finish("matmul", out, (a, b), bw)


# -- elementwise unary --------------------------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _finish("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _finish("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        e = np.exp(a.data)
    return _finish("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError(f"log of non-positive value (min {a.data.min():.3g})")
    out = np.log(a.data)
    return _finish("log", out, (a,), lambda g: (g / a.data,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi].  Gradient is 1 strictly inside, 0 elsewhere."""
    if lo > hi:
        raise ValueError(f"clamp needs lo <= hi, got lo={lo}, hi={hi}")
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _finish("clamp", out, (a,), lambda g: (g * inside,))


# -- reductions and shape ops -------------------------------------------------

def _check_axis(op: str, a: Tensor, axis: int | None) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    _check_axis("sum", a, axis)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _finish("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis("mean", a, axis)
    count = a.data.size if axis is None else a.shape[axis]
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _finish("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no tensors given")
    if axis not in (-1, ts[0].ndim - 1):
        raise ShapeError("concat only supports the last axis")
    lead = ts[0].shape[:-1]
    for t in ts:
        if t.ndim != ts[0].ndim or t.shape[:-1] != lead:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=-1)
    splits = np.cumsum([t.shape[-1] for t in ts])[:-1]
    return _finish("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=-1)))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", s, (a,), bw)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", out, (a,), bw)


def embedding_lookup(table, ids) -> Tensor:
    """Rows of a 2-D table gathered by an integer id array (rank <= 2)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {table.shape}")
    out = table.data[ids]

    def bw(g):
        flat = ids.reshape(-1)
        scatter = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))),
                                    shape=(table.shape[0], flat.size))
        return (np.asarray(scatter @ g.reshape(-1, table.shape[1])),)

    return _finish("embedding_lookup", out, (table,), bw)


# -- gradient checking --------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` must be deterministic; any randomness has to be frozen by the caller.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)

    def value(arr: np.ndarray) -> float:
        with no_tape():
            out = f(Tensor(arr))
        if out.data.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
        return float(out.data.reshape(-1)[0])

    f0 = value(base)
    if value(base) != f0:
        raise TensorError("grad_check: f is not deterministic (noise must be frozen)")

    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
        if out.requires_grad:
            tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += h
        minus[i] -= h
        flat[i] = (value(plus.reshape(base.shape)) - value(minus.reshape(base.shape))) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
