"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Every differentiable operation appends one node to the calling thread's active
:class:`Tape` whenever at least one input requires a gradient.  ``backward``
walks that tape once, newest node first, and accumulates (``+=``) gradients
into the ``.grad`` buffer of every leaf that requires one.  Callers zero the
buffers between optimisation steps.

Elementwise operations demand identical shapes.  Python scalars are accepted
as operands and expanded to the other operand's shape; anything else needs an
explicit :func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DIV_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ArithmeticError):
    """An operand lies outside the domain of the operation."""


class ContractError(RuntimeError):
    """A caller violated a documented precondition."""


@dataclass
class Node:
    kind: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Append-only computation record; inputs always precede their consumers."""

    nodes: list[Node] = field(default_factory=list)

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        self.nodes = []


_local = threading.local()


def _active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def recording() -> Iterator[Tape]:
    """Route recorded operations to a fresh tape for the duration of the block."""
    previous = getattr(_local, "tape", None)
    tape = _local.tape = Tape()
    try:
        yield tape
    finally:
        _local.tape = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._index: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._index is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

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

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if like is not None and np.ndim(value) == 0:
        return Tensor(np.full(like.shape, float(value)))
    return Tensor(value)


def _record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _active_tape()
        out._tape = tape
        out._index = tape.append(Node(kind, tuple(inputs), out, vjp))
    return out


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError(f"{op}: at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")
    return a, b


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _pair("div", a, b)
    ad, bd = a.data, b.data
    bad = np.abs(bd) < DIV_EPS
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DomainError(f"div: denominator element at {where} has magnitude < {DIV_EPS}")
    out = ad / bd
    return _record("div", (a, b), out, lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record("square", (a,), ad * ad, lambda g: (2.0 * ad * g,))


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise DomainError("sqrt: negative operand")
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def clamp_magnitude(a: Tensor, eps: float) -> tuple[Tensor, int]:
    """Push entries with ``|a| < eps`` out to ``±eps`` (zero maps to ``+eps``).

    Returns the clamped tensor and the number of clamped entries.  Clamped
    entries pass no gradient.
    """
    keep = np.abs(a.data) >= eps
    sign = np.where(a.data < 0, -1.0, 1.0)
    out = np.where(keep, a.data, sign * eps)
    return _record("clamp_magnitude", (a,), out, lambda g: (g * keep,)), int((~keep).sum())


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (boolean, same shape) restricts the normalisation to the selected
    entries; unselected entries come out exactly zero.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != input shape {x.shape}")
        if not mask.any(axis=-1).all():
            raise ContractError("softmax: every row needs at least one selected entry")
        shift = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x - shift, 0.0)), 0.0)
    else:
        e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), y, vjp)


# reductions ----------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _record("sum", (a,), out, lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size / max(out.size, 1)

    def vjp(g):
        return (_expand(g, shape, axis, keepdims) / count,)

    return _record("mean", (a,), out, vjp)


def l2norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        n = _expand(out, shape, axis, keepdims)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, _expand(g, shape, axis, keepdims) * ad / safe, 0.0),)

    return _record("l2norm", (a,), out, vjp)


# structural ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must agree exactly, or ``b`` may be a plain matrix
    shared across the batch.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands need >= 2 dims, got {a.shape} and {b.shape}")
    shared = b.data.ndim == 2
    if a.shape[-1] != b.shape[-2] or (not shared and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def slice_(a: Tensor, key) -> Tensor:
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _record("slice", (a,), a.data[key], vjp)


def take(table: Tensor, index) -> Tensor:
    """Gather rows of a 2-D table; ``index`` may have any shape."""
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ContractError(f"take: index out of range for table with {n} rows")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _record("take", (table,), table.data[index], vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} are incompatible on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast: cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _record("broadcast", (a,), out, vjp)


# differentiation -----------------------------------------------------------

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The record that produced ``root`` is consumed: it is cleared afterwards.
    """
    if root.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if root.is_leaf:
        if root.requires_grad:
            root.grad = np.ones(root.shape) if root.grad is None else root.grad + 1.0
        return
    tape = root._tape
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(tape.nodes[: root._index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    tape.clear()


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-4) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over all leaf entries."""
    if not 1e-6 <= h <= 1e-3:
        raise ContractError(f"grad_check: step {h} outside [1e-6, 1e-3]")
    saved = [leaf.grad for leaf in leaves]
    for leaf in leaves:
        leaf.grad = None
    with recording():
        out = f()
        backward(out)
    analytic = [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]
    for leaf, g in zip(leaves, saved):
        leaf.grad = g

    worst = 0.0
    with no_grad():
        for leaf, a in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                ai = a.reshape(-1)[i]
                worst = max(worst, abs(ai - numeric) / max(1.0, abs(ai)))
    return worst
