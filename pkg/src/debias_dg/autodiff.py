"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive records a node on the active :class:`Tape`.  A tape is opened
per forward pass::

    with Tape() as tape:
        y = ops.sum(ops.relu(x @ w))
    (gw,) = tape.backward(y, [w])

Operations performed with no active tape just compute values.
"""

from __future__ import annotations

import contextvars
import logging
import warnings
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "debias_dg_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes do not conform to the requested operation."""


class NonFiniteError(ValueError):
    """An operand or result contains NaN or infinity."""


class TapeError(RuntimeError):
    """Misuse of a tape (non-scalar backward, unknown leaf, ...)."""


class DisconnectedGradientWarning(UserWarning):
    """The requested activation does not influence the output."""


class Tensor:
    """A float64 array, optionally produced by a recorded operation."""

    __slots__ = ("_data", "_finite", "node", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, name: Optional[str] = None):
        self._data = np.array(data, dtype=np.float64)
        self._finite = False
        self.node: Optional[Node] = None
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._data.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to tensor of shape {self._data.shape}")
        self._data = value
        self._finite = False

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data)

    def is_leaf(self) -> bool:
        return self.node is None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, data={np.array2string(self._data, precision=4, threshold=8)})"

    # operator sugar; everything routes through the recorded primitives
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Node:
    __slots__ = ("kind", "inputs", "output", "vjp", "index")

    def __init__(self, kind: str, inputs: tuple, output: Tensor, vjp: Callable, index: int):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.index = index


class Tape:
    """Append-only record of the primitives executed in one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._members: dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise TapeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, t: Tensor) -> bool:
        return self._members.get(id(t)) is t

    def _record(self, kind: str, inputs: tuple, output: Tensor, vjp: Callable) -> None:
        node = Node(kind, inputs, output, vjp, len(self.nodes))
        for t in inputs:
            self._members[id(t)] = t
        self._members[id(output)] = output
        output.node = node
        self.nodes.append(node)

    def _sweep(self, output: Tensor, cotangent: np.ndarray) -> dict[int, np.ndarray]:
        node = output.node
        if node is None or node.index >= len(self.nodes) or self.nodes[node.index] is not node:
            raise TapeError("output was not produced by an operation on this tape")
        adjoints: dict[int, np.ndarray] = {id(output): cotangent}
        for node in reversed(self.nodes[: output.node.index + 1]):
            g = adjoints.get(id(node.output))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                key = id(inp)
                prev = adjoints.get(key)
                adjoints[key] = gi if prev is None else prev + gi
        return adjoints

    def vjp(self, output: Tensor, cotangent, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Vector-Jacobian product of ``output`` seeded with ``cotangent``."""
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != output.shape:
            raise ShapeError(f"vjp: cotangent shape {cotangent.shape} != output shape {output.shape}")
        adjoints = self._sweep(output, cotangent)
        return [_read_adjoint(adjoints, t) for t in wrt]

    def backward(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of the scalar ``output`` with respect to each tensor in ``wrt``.

        Every requested tensor must appear on this tape; tensors that do not
        influence ``output`` get a zero gradient.  Nothing is stored on the
        tensors themselves, so each call starts from fresh zero adjoints.
        """
        if output.size != 1 or output.ndim != 0:
            raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
        for t in wrt:
            if t not in self:
                label = t.name or f"shape {t.shape}"
                raise TapeError(f"tensor ({label}) is not on this tape")
        return self.vjp(output, np.ones(()), wrt)

    def grad_wrt_activation(self, output: Tensor, activation: Tensor,
                            cotangent=None) -> Tensor:
        """Derivative of ``output`` with respect to an intermediate value.

        The result is a plain constant (not recorded), so callers may use it as
        data without differentiating through it.  When ``activation`` does not
        influence ``output`` a zero tensor comes back and a
        :class:`DisconnectedGradientWarning` is issued.
        """
        if cotangent is None:
            if output.size != 1 or output.ndim != 0:
                raise TapeError(f"grad_wrt_activation needs a scalar output, got shape {output.shape}")
            cotangent = np.ones(())
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if activation not in self:
            warnings.warn("activation is not on this tape; returning zeros", DisconnectedGradientWarning,
                          stacklevel=2)
            return Tensor(np.zeros(activation.shape))
        adjoints = self._sweep(output, cotangent)
        g = adjoints.get(id(activation))
        if g is None:
            warnings.warn("activation is not an ancestor of the output; returning zeros",
                          DisconnectedGradientWarning, stacklevel=2)
            return Tensor(np.zeros(activation.shape))
        return Tensor(np.array(g, dtype=np.float64))


def _read_adjoint(adjoints: dict, t: Tensor) -> np.ndarray:
    g = adjoints.get(id(t))
    if g is None:
        return np.zeros(t.shape)
    return np.array(np.broadcast_to(g, t.shape), dtype=np.float64)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


# --------------------------------------------------------------------------
# primitive machinery


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(t: Tensor, kind: str) -> None:
    if t._finite:
        return
    if not np.isfinite(t._data).all():
        raise NonFiniteError(f"{kind}: non-finite operand of shape {t.shape}")
    t._finite = True


def record_forward(kind: str, operands: Sequence[Tensor], value: np.ndarray,
                   vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap ``value`` as the output of ``kind`` and register it on the active tape."""
    out = Tensor.__new__(Tensor)
    out._data = np.asarray(value, dtype=np.float64)
    out.node = None
    out.name = None
    if not np.isfinite(out._data).all():
        raise NonFiniteError(f"{kind}: produced non-finite values")
    out._finite = True
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape._record(kind, tuple(operands), out, vjp)
    return out


def _prepare(kind: str, *xs) -> list[Tensor]:
    ts = [as_tensor(x) for x in xs]
    for t in ts:
        _check_finite(t, kind)
    return ts


def _is_scalar(t: Tensor) -> bool:
    return t._data.shape in ((), (1,))


def _elementwise_pair(kind: str, a: Tensor, b: Tensor):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if _is_scalar(a):
        return sb
    if _is_scalar(b):
        return sa
    raise ShapeError(f"{kind}: incompatible shapes {sa} and {sb} (only scalar or identical shapes broadcast)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.reshape(np.sum(g), shape)


# --------------------------------------------------------------------------
# op catalog


def add(a, b) -> Tensor:
    a, b = _prepare("add", a, b)
    _elementwise_pair("add", a, b)
    sa, sb = a.shape, b.shape
    return record_forward("add", (a, b), a._data + b._data,
                          lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _prepare("subtract", a, b)
    _elementwise_pair("subtract", a, b)
    sa, sb = a.shape, b.shape
    return record_forward("subtract", (a, b), a._data - b._data,
                          lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _prepare("multiply", a, b)
    _elementwise_pair("multiply", a, b)
    ad, bd = a._data, b._data
    sa, sb = a.shape, b.shape
    return record_forward("multiply", (a, b), ad * bd,
                          lambda g: (_reduce_to(g * bd, sa), _reduce_to(g * ad, sb)))


def scale(x, c: float) -> Tensor:
    (x,) = _prepare("scale", x)
    c = float(c)
    return record_forward("scale", (x,), c * x._data, lambda g: (c * g,))


def matmul(a, b) -> Tensor:
    a, b = _prepare("matmul", a, b)
    ad, bd = a._data, b._data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if ad.ndim == 2 and bd.ndim == 2:
        vjp = lambda g: (g @ bd.T, ad.T @ g)  # noqa: E731
    elif ad.ndim == 1 and bd.ndim == 1:
        vjp = lambda g: (g * bd, g * ad)  # noqa: E731
    elif ad.ndim == 2:
        vjp = lambda g: (np.outer(g, bd), ad.T @ g)  # noqa: E731
    else:
        vjp = lambda g: (bd @ g, np.outer(ad, g))  # noqa: E731
    return record_forward("matmul", (a, b), ad @ bd, vjp)


def bias_add(x, b) -> Tensor:
    """Add a bias vector to every row of a matrix."""
    x, b = _prepare("bias_add", x, b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: incompatible shapes {x.shape} and {b.shape}")
    return record_forward("bias_add", (x, b), x._data + b._data, lambda g: (g, g.sum(axis=0)))


def relu(x) -> Tensor:
    (x,) = _prepare("relu", x)
    mask = x._data > 0
    return record_forward("relu", (x,), np.where(mask, x._data, 0.0), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    (x,) = _prepare("sigmoid", x)
    d = x._data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record_forward("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def softmax(x) -> Tensor:
    """Softmax over the last axis (row-wise for matrices)."""
    (x,) = _prepare("softmax", x)
    d = x._data
    if d.ndim == 0:
        raise ShapeError("softmax: needs at least one axis, got a scalar")
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return record_forward("softmax", (x,), s,
                          lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log(x) -> Tensor:
    """Natural log with the input clamped at ``LOG_FLOOR``."""
    (x,) = _prepare("log", x)
    d = x._data
    live = d >= LOG_FLOOR
    safe = np.maximum(d, LOG_FLOOR)
    return record_forward("log", (x,), np.log(safe), lambda g: (np.where(live, g / safe, 0.0),))


def sum(x, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    (x,) = _prepare("sum", x)
    shape = x.shape
    if axis is None:
        return record_forward("sum", (x,), np.sum(x._data),
                              lambda g: (np.broadcast_to(g, shape).copy(),))
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {shape}")
    return record_forward("sum", (x,), np.sum(x._data, axis=axis),
                          lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x, axis: Optional[int] = None) -> Tensor:
    (x,) = _prepare("mean", x)
    shape = x.shape
    if axis is None:
        n = x.size
        if n == 0:
            raise ShapeError("mean: empty tensor")
        return record_forward("mean", (x,), np.mean(x._data),
                              lambda g: (np.full(shape, g / n),))
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {shape}")
    n = shape[axis]
    return record_forward("mean", (x,), np.mean(x._data, axis=axis),
                          lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),))


def sq_norm(x) -> Tensor:
    """Squared L2 (Frobenius) norm."""
    (x,) = _prepare("sq_norm", x)
    d = x._data
    return record_forward("sq_norm", (x,), np.sum(d * d), lambda g: (2.0 * g * d,))


def hinge(t) -> Tensor:
    """Elementwise ``max(1 - t, 0)``; the subgradient at ``t == 1`` is taken as 0."""
    (t,) = _prepare("hinge", t)
    active = t._data < 1.0
    return record_forward("hinge", (t,), np.where(active, 1.0 - t._data, 0.0),
                          lambda g: (np.where(active, -g, 0.0),))


def concat(xs: Iterable, axis: int = 1) -> Tensor:
    xs = _prepare("concat", *xs)
    if not xs:
        raise ShapeError("concat: no operands")
    nd = xs[0].ndim
    for t in xs[1:]:
        other = [s for i, s in enumerate(t.shape) if i != axis % max(nd, 1)]
        first = [s for i, s in enumerate(xs[0].shape) if i != axis % max(nd, 1)]
        if t.ndim != nd or other != first:
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {t.shape} along axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return record_forward("concat", tuple(xs), np.concatenate([t._data for t in xs], axis=axis),
                          lambda g: tuple(np.split(g, splits, axis=axis)))


def row_select(x, rows) -> Tensor:
    (x,) = _prepare("row_select", x)
    rows = np.asarray(rows, dtype=np.intp)
    if rows.ndim != 1:
        raise ShapeError(f"row_select: row index must be 1-D, got shape {rows.shape}")
    if x.ndim == 0 or (rows.size and (rows.min() < -x.shape[0] or rows.max() >= x.shape[0])):
        raise ShapeError(f"row_select: rows out of range for shape {x.shape}")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return record_forward("row_select", (x,), x._data[rows], vjp)


def grad_reverse(x, weight: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-weight``."""
    (x,) = _prepare("grad_reverse", x)
    w = float(weight)
    return record_forward("grad_reverse", (x,), x._data.copy(), lambda g: (-w * g,))


def detach(x) -> Tensor:
    """A fresh leaf holding a copy of ``x``'s values (stop-gradient)."""
    x = as_tensor(x)
    out = Tensor(x._data.copy())
    out._finite = x._finite
    return out


def append_ones(x) -> Tensor:
    """``[x, 1]``: append a constant-one column to a matrix."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"append_ones: needs a matrix, got shape {x.shape}")
    return concat([x, Tensor(np.ones((x.shape[0], 1)))], axis=1)
