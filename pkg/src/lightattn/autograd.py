"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation produces a new :class:`Tensor` and, when any
input requires a gradient, a :class:`Node` holding a backward rule. Nodes are
appended to the active :class:`Tape` (if one is open) and are also reachable
from the output tensor, so :func:`backward` can run either from an explicit
tape or by discovering the graph from the loss.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_state = threading.local()


def _tapes() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded operation: inputs, output and the rule mapping dL/dout to dL/dinputs."""

    __slots__ = ("inputs", "_output", "rule", "op")

    def __init__(self, inputs, output, rule, op):
        self.inputs = inputs
        # weak, so tensor <-> node is not a reference cycle and graphs free promptly
        self._output = weakref.ref(output)
        self.rule = rule
        self.op = op

    @property
    def output(self):
        return self._output()

    def __repr__(self):
        out = self.output
        return f"Node({self.op}, out={None if out is None else out.shape})"


class Tape:
    """Ordered record of operations executed while the tape is open.

    Usage::

        with Tape() as tape:
            loss = f(params)
        backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - mis-nested usage
            stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """n-dimensional float64 array that can take part in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # --------------------------------------------------------------- operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # ---------------------------------------------------------- method aliases
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def backward(self, tape: Optional[Tape] = None):
        return backward(self, tape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor_from(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a flat row-major value list.

    Raises:
        DimensionError: ``len(values) != prod(shape)`` or a non-positive dimension.
        DomainError: any value is NaN or infinite.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise DimensionError(f"dimensions must be positive, got {shape}")
    flat = np.asarray(list(values), dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if flat.size != expected:
        raise DimensionError(f"shape {shape} needs {expected} values, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise DomainError("tensor values must be finite")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(tuple(inputs), out, rule, op)
        out.node = node
        stack = _tapes()
        if stack:
            stack[-1].nodes.append(node)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast shapes {shapes}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def rule(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def rule(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def rule(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def rule(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def rule(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _record(a.data**exponent, (a,), rule, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0
    return _record(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,), "relu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(ax % len(shape) for ax in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), rule, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), rule, "getitem")


def take(a, indices, axis: int = -1) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        # move the gathered axis block to the front so add.at sees one fancy index
        g_moved = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        full_moved = np.moveaxis(full, axis, 0)
        np.add.at(full_moved, indices, g_moved)
        return (full,)

    return _record(np.take(a.data, indices, axis=axis), (a,), rule, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(out, tensors, rule, "concat")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b`` (mask is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def rule(g):
        return unbroadcast(np.where(mask, g, 0.0), a.shape), unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _record(np.where(mask, a.data, b.data), (a, b), rule, "where")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes.

    Backward: ``dA = dC @ B^T`` and ``dB = A^T @ dC``, each summed over
    broadcast axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])

    def rule(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), rule, "matmul")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological_nodes(loss: Tensor) -> list:
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        node = t.node
        if node is None:
            continue
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((t, True))
        for inp in node.inputs:
            if inp.node is not None and id(inp.node) not in seen:
                stack.append((inp, False))
    return order


def backward(loss: Tensor, tape: Optional[Tape] = None, inputs: Optional[Sequence[Tensor]] = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf.

    Args:
        loss: scalar tensor.
        tape: if given, its nodes are replayed in reverse; otherwise the graph
            is discovered from ``loss``.
        inputs: optional leaves whose gradients are returned (zeros for leaves
            that do not influence the loss).

    Returns:
        List of gradient arrays aligned with ``inputs`` or ``None``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = tape.nodes if tape is not None else _topological_nodes(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    wanted = {id(t) for t in inputs} if inputs is not None else set()
    kept = {}

    for node in reversed(nodes):
        out = node.output
        if out is None:
            continue
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if id(out) in wanted:
            kept[id(out)] = g
        in_grads = node.rule(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                leaves[id(inp)] = inp
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig

    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    if tape is not None:
        for node in nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp.node is None:
                    leaves.setdefault(id(inp), inp)

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.broadcast_to(g, leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    if inputs is None:
        return None
    out = []
    for t in inputs:
        g = grads.get(id(t), kept.get(id(t)))
        out.append(np.zeros_like(t.data) if g is None else np.array(np.broadcast_to(g, t.shape)))
    return out
