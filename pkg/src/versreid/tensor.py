"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op evaluates eagerly with numpy and, when a :class:`GradTape`
is active and one of its inputs requires a gradient, appends a node to the tape.
``tape.backward(loss)`` then walks the recorded nodes in exact reverse execution
order.  Outside a tape nothing is recorded, which is how inference runs.

Storage is float32.  Inside :func:`float64_replay` newly created tensors are
float64, which the gradient-check harness relies on.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

_local = threading.local()
_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(RuntimeError):
    """A precondition of an op or of the tape was violated."""


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def float64_replay() -> Iterator[None]:
    prev = default_dtype()
    _local.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _local.dtype = prev


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "GradTape | None":
    tapes = _tapes()
    return tapes[-1] if tapes else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=default_dtype()))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.node = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)
    __getitem__ = lambda self, idx: index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Node:
    __slots__ = ("seq", "out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.seq = next(_node_ids)
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "GradTape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        tapes = _tapes()
        if not tapes or tapes[-1] is not self:
            raise ContractError("gradient tapes must be exited in LIFO order")
        tapes.pop()

    def record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._ids.add(id(node))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or id(loss.node) not in self._ids:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            pgrads = node.backward(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                elif parent.node is None:
                    parent.grad = pg if parent.grad is None else parent.grad + pg
                else:
                    grads[key] = pg
        for node in self.nodes:
            node.out.node = None
        self.nodes.clear()
        self._ids.clear()


def backward_pass(loss: Tensor, tape: GradTape) -> None:
    tape.backward(loss)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    saved = _tapes()[:]
    _tapes().clear()
    try:
        yield
    finally:
        _tapes().extend(saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, parents, backward)
        out.node = node
        tape.record(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from e
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from e
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from e
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"cannot divide shapes {a.shape} and {b.shape}") from e

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * data / b.data, b.shape)
        return ga, gb

    return _result(data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return _result(data, (x,), lambda g: (g * data,))


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)
    return _result(data, (x,), lambda g: (g * 0.5 / data,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` against a constant; relu when floor is 0."""
    mask = x.data > floor
    data = np.where(mask, x.data, x.data.dtype.type(floor))
    return _result(data, (x,), lambda g: (g * mask,))


def relu(x: Tensor) -> Tensor:
    return maximum(x, 0.0)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    data = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _result(data, (x,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from e

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), backward)


# -- shape ops -------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    data = x.data.reshape(shape)
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(x.data, shape)
    return _result(data, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise ShapeError(f"cannot concatenate shapes {shapes} along axis {axis}") from e
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(parts), backward)


def index(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; covers slicing and row gathers."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    data = x.data[idx]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(data, (x,), backward)


def take(table: Tensor, ids, axis: int = 0) -> Tensor:
    """Embedding gather: rows of ``table`` selected by integer ids."""
    ids = np.asarray(ids, dtype=np.intp)
    n = table.shape[axis]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"gather index out of range for axis of size {n}")
    data = np.take(table.data, ids, axis=axis)

    def backward(g):
        out = np.zeros_like(table.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, ids, np.moveaxis(g, axis, 0) if axis else g)
        return (out,)

    return _result(data, (table,), backward)


# -- reductions --------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = np.sum(x.data, axis=axis, keepdims=keepdims)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=x.data.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(data, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- row-wise ops ----------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (data * (g - (g * data).sum(axis=-1, keepdims=True)),)

    return _result(data, (x,), backward)


def layer_norm_rows(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
                    eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then optional affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def backward(g):
        gx = inv / d * (d * g - g.sum(axis=-1, keepdims=True)
                        - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (gx,)

    out = _result(xhat, (x,), backward)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between rows: ``(m, d), (n, d) -> (m, n)``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"squared distance needs (m,d) and (n,d), got {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    data = (diff * diff).sum(axis=-1)

    def backward(g):
        w = 2.0 * g[:, :, None] * diff
        return w.sum(axis=1), -w.sum(axis=0)

    return _result(data, (a, b), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = sqrt(maximum(sum(x * x, axis=-1, keepdims=True), eps))
    return div(x, norm)


# -- gradient checking -----------------------------------------------------

def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                    step: float = 1e-3, tol: float = 1e-4) -> float:
    """Compare tape gradients of ``fn(*inputs)`` with central differences.

    Runs in float64.  Returns the worst ``|analytic - numeric| / max(1, |numeric|)``
    and raises AssertionError when it reaches ``tol``.
    """
    with float64_replay():
        leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        with GradTape() as tape:
            out = fn(*leaves)
        tape.backward(out)
        analytic = [
            leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
        ]
        worst = 0.0
        for leaf, ga in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = float(fn(*[Tensor._wrap(l.data) for l in leaves]).data)
                flat[i] = orig - step
                down = float(fn(*[Tensor._wrap(l.data) for l in leaves]).data)
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                err = math.fabs(gflat[i] - numeric) / max(1.0, math.fabs(numeric))
                worst = max(worst, err)
    if worst >= tol:
        raise AssertionError(f"gradient mismatch: worst relative error {worst:.3g} >= {tol}")
    return worst
