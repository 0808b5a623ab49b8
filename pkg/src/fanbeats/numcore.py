"""Dense f64 tensors with reverse-mode automatic differentiation.

Every primitive evaluates eagerly on numpy arrays and, when any input takes
part in the gradient graph, records a node holding its parents and a
closure mapping the output adjoint to the input adjoints. ``backward`` walks
the nodes reachable from a scalar loss in reverse creation order, which is a
topological order because node ids increase monotonically.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "NumcoreError",
    "DimensionError",
    "DomainError",
    "EmptyReductionError",
    "RankError",
    "NoGraphError",
    "OracleError",
    "tensor",
    "as_tensor",
    "matmul",
    "map_unary",
    "relu",
    "tanh",
    "exp",
    "log",
    "square",
    "absolute",
    "reduce",
    "softmax_rows",
    "maximum",
    "where",
    "concat",
    "take_rows",
    "custom_op",
    "backward",
    "build_tape",
    "no_grad",
    "finite_difference_grad",
]


class NumcoreError(Exception):
    pass


class DimensionError(NumcoreError, ValueError):
    pass


class DomainError(NumcoreError, ValueError):
    pass


class EmptyReductionError(NumcoreError, ValueError):
    pass


class RankError(NumcoreError, ValueError):
    pass


class NoGraphError(NumcoreError, RuntimeError):
    pass


class OracleError(NumcoreError, ArithmeticError):
    pass


_ids = itertools.count(1)
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording graph nodes."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A dense float64 array that may participate in the gradient graph."""

    __slots__ = ("data", "requires_grad", "node_id", "grad", "name", "_parents", "_adjoint", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids) if requires_grad else None
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint = None
        self._op = "leaf"

    # construction of interior nodes -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], adjoint, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        live = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = live
        if live:
            out.node_id = next(_ids)
            out._parents = tuple(parents)
            out._adjoint = adjoint
        else:
            out.node_id = None
            out._parents = ()
            out._adjoint = None
        out._op = op
        return out

    # basic properties ---------------------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._adjoint is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic ---------------------------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        if not other.requires_grad:
            return _mul(self, Tensor(1.0 / other.data))
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(as_tensor(other), self)

    def __neg__(self):
        return map_unary("neg", self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from None


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data + b.data

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), adjoint, "add")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data * b.data

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), adjoint, "mul")


def _div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data / b.data

    def adjoint(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._from_op(out, (a, b), adjoint, "div")


def matmul(A: Tensor, B: Tensor) -> Tensor:
    """Matrix product of a (r, k) and a (k, c) tensor."""
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {A.shape} x {B.shape}")
    out = A.data @ B.data

    def adjoint(g):
        return g @ B.data.T, A.data.T @ g

    return Tensor._from_op(out, (A, B), adjoint, "matmul")


def transpose(X: Tensor) -> Tensor:
    out = X.data.T

    def adjoint(g):
        return (g.T,)

    return Tensor._from_op(out, (X,), adjoint, "transpose")


def _reshape(X: Tensor, shape) -> Tensor:
    try:
        out = X.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {X.shape} into {shape}") from None

    def adjoint(g):
        return (g.reshape(X.shape),)

    return Tensor._from_op(out, (X,), adjoint, "reshape")


def _getitem(X: Tensor, index) -> Tensor:
    out = X.data[index]
    if isinstance(out, np.ndarray):
        out = out.copy()
    else:
        out = np.array(out)

    def adjoint(g):
        full = np.zeros_like(X.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out, (X,), adjoint, "getitem")


def take_rows(X: Tensor, idx: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D tensor (repeated indices allowed)."""
    return _getitem(X, np.asarray(idx, dtype=np.intp))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def adjoint(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return Tensor._from_op(out, tuple(parts), adjoint, "concat")


_UNARY_KINDS = ("relu", "tanh", "exp", "log", "neg", "square", "abs")


def map_unary(kind: str, X: Tensor) -> Tensor:
    """Element-wise primitive with its registered adjoint.

    ``relu`` and ``abs`` use a zero subgradient at exactly 0.
    """
    X = as_tensor(X)
    x = X.data
    if kind == "relu":
        out = np.maximum(x, 0.0)

        def adjoint(g):
            return (g * (x > 0),)

    elif kind == "tanh":
        out = np.tanh(x)

        def adjoint(g):
            return (g * (1.0 - out * out),)

    elif kind == "exp":
        out = np.exp(x)
        if not np.all(np.isfinite(out)):
            bad = int(np.argmax(~np.isfinite(out)))
            raise DomainError(f"exp overflow at flat index {bad}")

        def adjoint(g):
            return (g * out,)

    elif kind == "log":
        if np.any(x <= 0):
            bad = tuple(int(i) for i in np.unravel_index(int(np.argmax(x <= 0)), x.shape)) if x.ndim else ()
            raise DomainError(f"log of non-positive entry at index {bad}")
        out = np.log(x)

        def adjoint(g):
            return (g / x,)

    elif kind == "neg":
        out = -x

        def adjoint(g):
            return (-g,)

    elif kind == "square":
        out = x * x

        def adjoint(g):
            return (2.0 * g * x,)

    elif kind == "abs":
        out = np.abs(x)

        def adjoint(g):
            return (g * np.sign(x),)

    else:
        raise ValueError(f"unknown unary kind {kind!r}; expected one of {_UNARY_KINDS}")
    return Tensor._from_op(out, (X,), adjoint, kind)


def relu(X):
    return map_unary("relu", X)


def tanh(X):
    return map_unary("tanh", X)


def exp(X):
    return map_unary("exp", X)


def log(X):
    return map_unary("log", X)


def square(X):
    return map_unary("square", X)


def absolute(X):
    return map_unary("abs", X)


def maximum(X: Tensor, floor: float) -> Tensor:
    """Clamp from below; the adjoint passes only where ``X > floor``."""
    X = as_tensor(X)
    mask = X.data > floor
    out = np.where(mask, X.data, floor)

    def adjoint(g):
        return (g * mask,)

    return Tensor._from_op(out, (X,), adjoint, "maximum")


def where(mask: np.ndarray, A: Tensor, B: Tensor) -> Tensor:
    A, B = as_tensor(A), as_tensor(B)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, A.data, B.data)

    def adjoint(g):
        return _unbroadcast(np.where(mask, g, 0.0), A.shape), _unbroadcast(np.where(mask, 0.0, g), B.shape)

    return Tensor._from_op(out, (A, B), adjoint, "where")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reduce(kind: str, X: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """sum / mean / max / logsumexp over one axis or the whole tensor."""
    X = as_tensor(X)
    x = X.data
    ax = _norm_axis(axis, x.ndim)
    n = x.size if ax is None else x.shape[ax]
    if n == 0:
        raise EmptyReductionError(f"{kind} over an empty axis of shape {x.shape}")

    def expand(g):
        if ax is None:
            return np.broadcast_to(g, x.shape) if g.ndim == 0 else np.broadcast_to(g.reshape(()), x.shape)
        return g if keepdims else np.expand_dims(g, ax)

    if kind == "sum":
        out = x.sum(axis=ax, keepdims=keepdims)

        def adjoint(g):
            return (np.broadcast_to(expand(g), x.shape).copy(),)

    elif kind == "mean":
        out = x.mean(axis=ax, keepdims=keepdims)

        def adjoint(g):
            return (np.broadcast_to(expand(g), x.shape) / n,)

    elif kind == "max":
        if ax is None:
            flat = int(np.argmax(x))
            out = np.array(x.reshape(-1)[flat])
            if keepdims:
                out = out.reshape((1,) * x.ndim)

            def adjoint(g):
                full = np.zeros(x.size)
                full[flat] = np.asarray(g).reshape(-1)[0]
                return (full.reshape(x.shape),)

        else:
            arg = np.argmax(x, axis=ax)
            out = np.take_along_axis(x, np.expand_dims(arg, ax), axis=ax)
            if not keepdims:
                out = np.squeeze(out, axis=ax)

            def adjoint(g):
                full = np.zeros_like(x)
                np.put_along_axis(full, np.expand_dims(arg, ax), expand(g), axis=ax)
                return (full,)

    elif kind == "logsumexp":
        m = x.max(axis=ax, keepdims=True)
        shifted = np.exp(x - m)
        s = shifted.sum(axis=ax, keepdims=True)
        out_k = np.log(s) + m
        out = out_k if keepdims else (out_k.reshape(()) if ax is None else np.squeeze(out_k, axis=ax))
        weights = shifted / s

        def adjoint(g):
            gk = np.asarray(g).reshape(()) if ax is None else expand(g)
            return (weights * gk,)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return Tensor._from_op(np.asarray(out, dtype=np.float64), (X,), adjoint, kind)


def logsumexp(X, axis=None, keepdims=False):
    return reduce("logsumexp", X, axis, keepdims)


def softmax_rows(X: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, shifted by each row's max."""
    X = as_tensor(X)
    if X.ndim != 2:
        raise RankError(f"softmax_rows expects a matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X.data)):
        raise DomainError("softmax_rows received non-finite entries")
    z = X.data - X.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(out, (X,), adjoint, "softmax_rows")


def custom_op(data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable, op: str = "custom") -> Tensor:
    """Register a fused primitive whose adjoint is supplied by the caller.

    ``adjoint`` maps the output adjoint to a tuple with one array (or None)
    per parent.
    """
    return Tensor._from_op(np.asarray(data, dtype=np.float64), tuple(parents), adjoint, op)


# backward ----------------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int | None, ...]
    output: int


@dataclass
class GradTape:
    """Primitive applications reachable from a loss, in creation order."""

    entries: list[TapeEntry] = field(default_factory=list)
    nodes: list[Tensor] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.entries)


def build_tape(loss: Tensor) -> GradTape:
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        for p in t._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append(p)
    nodes = sorted(seen.values(), key=lambda t: t.node_id)
    entries = [
        TapeEntry(t._op, tuple(p.node_id for p in t._parents), t.node_id) for t in nodes if not t.is_leaf
    ]
    return GradTape(entries=entries, nodes=nodes)


def backward(loss: Tensor, accumulate: bool = True) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Returns ``{node_id: gradient}`` for every leaf that requires grad. With
    ``accumulate`` the gradients are also added into each leaf's ``.grad``.
    """
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise NoGraphError("loss is not attached to a gradient graph")
    tape = build_tape(loss)
    adj: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for t in reversed(tape.nodes):
        g = adj.pop(t.node_id, None)
        if g is None:
            continue
        if t.is_leaf:
            leaves[t.node_id] = g
            continue
        grads = t._adjoint(g)
        for p, gp in zip(t._parents, grads):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64)
            if gp.shape != p.data.shape:
                gp = gp.reshape(p.data.shape)
            prev = adj.get(p.node_id)
            adj[p.node_id] = gp if prev is None else prev + gp
    if accumulate:
        for t in tape.nodes:
            if t.is_leaf and t.node_id in leaves:
                g = leaves[t.node_id]
                t.grad = g.copy() if t.grad is None else t.grad + g
    return leaves


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``params`` (zeros when unreachable)."""
    params = list(params)
    leaves = backward(loss, accumulate=False)
    return [leaves.get(p.node_id, np.zeros_like(p.data)) for p in params]


def finite_difference_grad(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(np.asarray(f(Tensor(base)).data).reshape(-1)[0])
            flat[i] = orig - h
            fm = float(np.asarray(f(Tensor(base)).data).reshape(-1)[0])
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise OracleError(f"non-finite function value near coordinate {i}")
            out.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return out
