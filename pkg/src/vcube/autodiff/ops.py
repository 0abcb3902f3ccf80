"""Differentiable operations on :class:`Value`.

Every op computes its forward result with numpy and registers a closure that
maps the output gradient to one gradient per parent.  Binary elementwise ops
broadcast like numpy; their gradients are summed back to the operand shapes.
"""

from __future__ import annotations

import numpy as np

from vcube.autodiff.core import Value, as_value, make_node
from vcube.errors import ShapeError

_GELU_C = np.sqrt(2.0 / np.pi)
LAYERNORM_EPS = 1e-5


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Value, b: Value) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw, "mul")


def scale(x, c: float) -> Value:
    x = as_value(x)
    c = float(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape])
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", [a.shape, b.shape]) from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw, "matmul")


def sum(x, axis=None, keepdims: bool = False) -> Value:  # noqa: A001
    x = as_value(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Value:
    x = as_value(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_node(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def reshape(x, shape) -> Value:
    x = as_value(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [x.shape, tuple(shape)]) from None
    old = x.shape
    return make_node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Value:
    x = as_value(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Value:
    x = as_value(x)
    return make_node(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, idx) -> Value:
    x = as_value(x)
    out = x.data[idx]
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.array(out, dtype=np.float64), (x,), bw, "getitem")


def take(x, indices, axis: int = 0) -> Value:
    """Gather slices of ``x`` along ``axis`` (indices may repeat)."""
    x = as_value(x)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < -x.shape[axis] or indices.max() >= x.shape[axis]):
        raise ShapeError("take", [x.shape, indices.shape], "index out of range")
    out = np.take(x.data, indices, axis=axis)
    shape = x.shape

    def bw(g):
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        gm = gm.reshape((indices.size,) + gm.shape[indices.ndim:])
        flat = indices.reshape(-1) % shape[axis]
        moved = (shape[axis],) + shape[:axis] + shape[axis + 1:]
        acc = np.zeros((moved[0], int(np.prod(moved[1:], dtype=np.int64))))
        np.add.at(acc, flat, gm.reshape(indices.size, -1))
        return (np.moveaxis(acc.reshape(moved), 0, axis),)

    return make_node(out, (x,), bw, "take")


def concat(values, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    if not values:
        raise ShapeError("concat", [], "nothing to concatenate")
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeError("concat", [v.shape for v in values]) from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tuple(values), bw, "concat")


def stack(values, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    return concat([reshape(v, v.shape[:axis] + (1,) + v.shape[axis:]) for v in values], axis=axis)


def softmax(x) -> Value:
    """Softmax over the last axis."""
    x = as_value(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_node(p, (x,), bw, "softmax")


def weighted_softmax(x, w) -> Value:
    """``w * exp(x) / sum(w * exp(x))`` over the last axis.

    With 0/1 weights this is softmax restricted to the weighted entries; the
    gradient with respect to ``w`` stays defined where ``w`` is zero.
    """
    x, w = as_value(x), as_value(w)
    try:
        wb = np.broadcast_to(w.data, x.shape)
    except ValueError:
        raise ShapeError("weighted_softmax", [x.shape, w.shape]) from None
    live = np.where(wb > 0, x.data, -np.inf)
    m = live.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, x.data.max(axis=-1, keepdims=True))
    # zero-weight entries may sit far above the live max; cap to avoid overflow
    e = np.exp(np.minimum(x.data - m, 60.0))
    s = (wb * e).sum(axis=-1, keepdims=True)
    p = wb * e / s
    wshape = w.shape

    def bw(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        gx = p * (g - inner) if x.requires_grad else None
        gw = _unbroadcast(e / s * (g - inner), wshape) if w.requires_grad else None
        return gx, gw

    return make_node(p, (x, w), bw, "weighted_softmax")


def layernorm(x, eps: float = LAYERNORM_EPS) -> Value:
    """Normalize over the last axis; no affine part (compose with mul/add).

    A constant input has zero variance and maps to zeros.
    """
    x = as_value(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("layernorm", [x.shape], "need a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return make_node(y, (x,), bw, "layernorm")


def gelu(x) -> Value:
    """GELU, tanh approximation."""
    x = as_value(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd ** 3))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return make_node(out, (x,), bw, "gelu")


def tanh(x) -> Value:
    x = as_value(x)
    t = np.tanh(x.data)
    return make_node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def masked_mean(x, w, axis: int = 0) -> Value:
    """``sum_i w_i x_i / sum_i w_i`` along ``axis``; ``w`` is 1-D."""
    x, w = as_value(x), as_value(w)
    if w.ndim != 1 or w.shape[0] != x.shape[axis]:
        raise ShapeError("masked_mean", [x.shape, w.shape])
    total = float(w.data.sum())
    shape = [1] * x.ndim
    shape[axis] = -1
    wb = w.data.reshape(shape)
    out = (x.data * wb).sum(axis=axis) / total

    def bw(g):
        ge = np.expand_dims(g, axis)
        gx = np.broadcast_to(ge * wb / total, x.shape).copy() if x.requires_grad else None
        gw = None
        if w.requires_grad:
            diff = x.data - np.expand_dims(out, axis)
            other = tuple(i for i in range(x.ndim) if i != axis)
            gw = (diff * ge).sum(axis=other) / total
        return gx, gw

    return make_node(out, (x, w), bw, "masked_mean")


def embedding(table, ids) -> Value:
    table = as_value(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", [table.shape, ids.shape], "id out of range")
    return take(table, ids, axis=0)


def cross_entropy(logits, targets) -> Value:
    """Mean negative log-likelihood of integer ``targets`` under row-wise logits."""
    logits = as_value(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", [logits.shape, targets.shape])
    n = targets.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return make_node(np.asarray(loss), (logits,), bw, "cross_entropy")


def straight_through(hard, soft) -> Value:
    """Forward emits ``hard``; backward hands the gradient to ``soft`` unchanged."""
    soft = as_value(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError("straight_through", [hard.shape, soft.shape])
    return make_node(hard.copy(), (soft,), lambda g: (g,), "straight_through")


def detach(x) -> Value:
    return Value(as_value(x).data)


def square_sum(x) -> Value:
    x = as_value(x)
    return make_node(np.asarray((x.data * x.data).sum()), (x,), lambda g: (2.0 * g * x.data,), "square_sum")


OPS = {
    name: fn for name, fn in {
        "add": add, "sub": sub, "mul": mul, "scale": scale, "matmul": matmul,
        "sum": sum, "mean": mean, "reshape": reshape, "transpose": transpose,
        "swapaxes": swapaxes, "getitem": getitem, "take": take, "concat": concat,
        "softmax": softmax, "weighted_softmax": weighted_softmax, "layernorm": layernorm,
        "gelu": gelu, "tanh": tanh, "masked_mean": masked_mean, "embedding": embedding,
        "cross_entropy": cross_entropy, "straight_through": straight_through,
        "square_sum": square_sum,
    }.items()
}
