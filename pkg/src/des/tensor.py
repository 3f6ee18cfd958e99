"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value flowing through the network is a :class:`Tensor`: a C-contiguous
float64 array plus, when gradients are required, a record of the operation
that produced it.  Calling :func:`backward` on a scalar loss replays that
tape in reverse, accumulating gradients into every reachable tensor that
has ``requires_grad`` set (fan-out sums, as usual).

Shapes follow the channel-first convention ``C x H x W``; most operations
also accept an extra leading batch axis so a whole minibatch can run
through one tape node.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes cannot be combined by the requested operation."""


_tape_state = threading.local()


def _tape_enabled():
    return getattr(_tape_state, "enabled", True)


class no_grad:
    """Context manager that disables tape recording (inference mode).

    The flag is per-thread, so parallel inference does not disturb a
    training tape being built elsewhere.
    """

    def __enter__(self):
        self._prev = _tape_enabled()
        _tape_state.enabled = False
        return self

    def __exit__(self, *exc):
        _tape_state.enabled = self._prev
        return False


class Tensor:
    """A dense n-dimensional float64 value, optionally on the autodiff tape.

    ``data`` is always a C-contiguous float64 ndarray (row-major, so the
    flat buffer matches the logical index order).  ``grad`` is filled in by
    :func:`backward` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        # NB: ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.name = name
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor(shape={self.data.shape}, op={tag!r})"

    # operator sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self, params=None):
        return backward(self, params)


def as_tensor(value):
    """Wrap ``value`` in a Tensor if it is not one already (no grad)."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, parents, vjp, op):
    """Build an operation-result tensor, recording the tape edge if needed."""
    out = Tensor(data)
    out.op = op
    if _tape_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _broadcast_compatible(sa, sb):
    # legal: identical shapes, either side scalar, or equal-rank shapes
    # where each axis matches or is 1 (covers the C x 1 x 1 gate pattern)
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) == len(sb):
        return all(a == b or a == 1 or b == 1 for a, b in zip(sa, sb))
    return False


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    out = grad.sum(axis=axes, keepdims=True) if axes else grad
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_compatible(a.shape, b.shape):
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    data = a.data + b.data

    def vjp(up):
        return _unbroadcast(up, a.shape), _unbroadcast(up, b.shape)

    return _node(data, (a, b), vjp, "add")


def mul(a, b):
    """Elementwise product.

    Shapes must match exactly, or one operand may be a scalar, or the two
    shapes may have equal rank with broadcast (size-1) axes -- in particular
    a per-channel gate of shape ``C x 1 x 1`` against ``C x H x W``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_compatible(a.shape, b.shape):
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    data = a.data * b.data

    def vjp(up):
        return _unbroadcast(up * b.data, a.shape), _unbroadcast(up * a.data, b.shape)

    return _node(data, (a, b), vjp, "mul")


def log(x):
    """Natural logarithm; input must be strictly positive."""
    x = as_tensor(x)
    data = np.log(x.data)

    def vjp(up):
        return (up / x.data,)

    return _node(data, (x,), vjp, "log")


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def vjp(up):
        return (up * data,)

    return _node(data, (x,), vjp, "exp")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = tuple(sorted(a % ndim for a in axes))
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return out


def reduce_sum(x, axes=None):
    x = as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    data = x.data.sum(axis=ax) if ax else x.data.copy()

    def vjp(up):
        g = np.expand_dims(up, ax) if ax else up
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(data, (x,), vjp, "sum")


def reduce_mean(x, axes=None):
    """Arithmetic mean over ``axes`` (all axes when None); reduced axes are dropped."""
    x = as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    count = 1
    for a in ax:
        count *= x.shape[a]
    if count == 0:
        raise ShapeError(f"mean over empty extent: shape {x.shape}, axes {axes}")
    data = x.data.mean(axis=ax) if ax else x.data.copy()

    def vjp(up):
        g = np.expand_dims(up, ax) if ax else up
        return (np.broadcast_to(g, x.shape) / count,)

    return _node(data, (x,), vjp, "mean")


# ---------------------------------------------------------------------------
# linear algebra and shape surgery
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def vjp(up):
        if b.ndim == 1:
            return np.outer(up, b.data), a.data.T @ up
        return up @ b.data.T, a.data.T @ up

    return _node(data, (a, b), vjp, "matmul")


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def vjp(up):
        return (up.reshape(x.shape),)

    return _node(data, (x,), vjp, "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def vjp(up):
        return (np.ascontiguousarray(up.transpose(inv)),)

    return _node(data, (x,), vjp, "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(up):
        return tuple(np.ascontiguousarray(g) for g in np.split(up, splits, axis=axis))

    return _node(data, tensors, vjp, "concat")


# ---------------------------------------------------------------------------
# gathers (targets/indices are plain integer arrays, never differentiated)
# ---------------------------------------------------------------------------

def index_rows(x, idx):
    """Select rows ``x[idx]`` along axis 0; gradient scatter-adds back."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    data = x.data[idx]

    def vjp(up):
        g = np.zeros_like(x.data)
        np.add.at(g, idx, up)
        return (g,)

    return _node(data, (x,), vjp, "index_rows")


def take_per_row(x, cols):
    """``out[i] = x[i, cols[i]]`` for a 2-d tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"take_per_row needs a 2-d tensor, got {x.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(x.shape[0])
    data = x.data[rows, cols]

    def vjp(up):
        g = np.zeros_like(x.data)
        np.add.at(g, (rows, cols), up)
        return (g,)

    return _node(data, (x,), vjp, "take_per_row")


def take_channel_per_pixel(x, labels):
    """Pick one channel per spatial location.

    ``x`` is ``C x H x W`` (or ``B x C x H x W``) and ``labels`` an integer
    grid ``H x W`` (resp. ``B x H x W``); returns ``out[..., h, w] =
    x[..., labels[..., h, w], h, w]``.
    """
    x = as_tensor(x)
    labels = np.asarray(labels, dtype=np.intp)
    if x.ndim == 3:
        if labels.shape != x.shape[1:]:
            raise ShapeError(f"label grid {labels.shape} does not match {x.shape}")
        h, w = np.indices(labels.shape)
        sel = (labels, h, w)
    elif x.ndim == 4:
        if labels.shape != (x.shape[0],) + x.shape[2:]:
            raise ShapeError(f"label grid {labels.shape} does not match {x.shape}")
        b, h, w = np.indices(labels.shape)
        sel = (b, labels, h, w)
    else:
        raise ShapeError(f"take_channel_per_pixel needs rank 3 or 4, got {x.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= x.shape[-3]:
        raise ShapeError(f"labels out of range [0, {x.shape[-3]})")
    data = x.data[sel]

    def vjp(up):
        g = np.zeros_like(x.data)
        np.add.at(g, sel, up)
        return (g,)

    return _node(data, (x,), vjp, "take_channel_per_pixel")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Reverse-mode pass from a scalar ``loss``.

    Fills ``t.grad`` for every tensor on the tape that requires a gradient.
    When ``params`` is given, any listed parameter the loss does not reach
    gets an explicit zero gradient so optimizers can treat the set uniformly.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for t in order:
        t.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for t in reversed(order):
        if t._vjp is None or t.grad is None:
            continue
        grads = t._vjp(t.grad)
        for parent, g in zip(t._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def find_first_nonfinite(root):
    """Walk the tape feeding ``root`` (inputs first) and return the first
    tensor holding a NaN/Inf, or None if everything is finite."""
    for t in _topo_order(root):
        if not np.isfinite(t.data).all():
            return t
    return None
