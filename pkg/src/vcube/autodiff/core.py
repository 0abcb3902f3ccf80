"""Graph nodes and the reverse pass."""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from vcube.errors import GraphError, NonFiniteError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _finite_checks() -> bool:
    return getattr(_state, "check_finite", True)


@contextlib.contextmanager
def no_grad():
    """Build values without recording the graph (inference, optimizer updates)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = _finite_checks()
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class Value:
    """A float64 array plus the bookkeeping needed to differentiate through it.

    Leaves are created directly; interior nodes come from the functions in
    :mod:`vcube.autodiff.ops`.  ``grad`` is allocated lazily by
    :func:`backward` and accumulates across graphs until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Value":
        return Value(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Value(op={self.op}{tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in ops.
    def __add__(self, other):
        from vcube.autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from vcube.autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from vcube.autodiff import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from vcube.autodiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from vcube.autodiff import ops
        if isinstance(other, Value):
            raise TypeError("division by a Value is not supported; use masked_mean or mul")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from vcube.autodiff import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from vcube.autodiff import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from vcube.autodiff import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from vcube.autodiff import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from vcube.autodiff import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from vcube.autodiff import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from vcube.autodiff import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def make_node(data: np.ndarray, parents: tuple, backward, op: str) -> Value:
    """Wrap an op result; ``backward(g)`` returns one gradient (or None) per parent."""
    if _finite_checks() and not np.all(np.isfinite(data)):
        tag = next((p.name for p in parents if p.name), None)
        raise NonFiniteError(op, tag)
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    out._consumed = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def topological_order(root: Value) -> list[Value]:
    """Nodes reachable from ``root`` with every node after all of its parents."""
    order: list[Value] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError(f"cycle detected at node {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError(f"cycle detected at node {p!r}")
            if ps is None and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Value) -> dict[Value, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The graph is released afterwards; a second call on the same root raises.
    Returns a mapping from each leaf to the gradient contributed by this call.
    """
    if root._consumed:
        raise GraphError("backward() already ran on this graph; rebuild it before calling again")
    if root.data.size != 1:
        raise GraphError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("root does not depend on any value that requires grad")

    order = topological_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    contributed: dict[Value, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                contributed[node] = g
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            if k in pending:
                pending[k] = pending[k] + pg
            else:
                pending[k] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    root._consumed = True
    return contributed
