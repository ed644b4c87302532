"""Dense tensors with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that requires a gradient records a node
(its parents and a backward closure) and receives a monotonically increasing
sequence number.  The graph of a loss is the set of nodes reachable from it;
:func:`backward` walks that set in exact reverse creation order, which is a
valid reverse topological order because parents always exist before their
children.

Arrays keep the dtype they were created with, so the same graph can be run in
float32 for training and in float64 as a finite-difference oracle.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "abs_",
    "add",
    "backward",
    "concat",
    "detach",
    "gather_rows",
    "gelu",
    "graph_nodes",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "sum_",
    "transpose",
    "where",
]

_seq = itertools.count()
_local = threading.local()


def grad_enabled():
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not (isinstance(data, (np.ndarray, np.floating)) and np.issubdtype(arr.dtype, np.floating)):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bw)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw)


def scale(x, c):
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def reciprocal(x):
    y = 1.0 / x.data
    return _make(y, (x,), lambda g: (-g * y * y,))


def power(x, p):
    p = float(p)
    data = x.data ** p
    return _make(data, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def abs_(x):
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant."""
    cond = np.asarray(cond, dtype=bool)
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = np.where(cond, a.data, b.data)

    def bw(g):
        zero = np.zeros_like(g)
        return (_unbroadcast(np.where(cond, g, zero), a.shape),
                _unbroadcast(np.where(cond, zero, g), b.shape))

    return _make(data, (a, b), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """GELU, tanh approximation."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    t = np.tanh(c * (xd + k * xd ** 3))
    data = 0.5 * xd * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _make(data, (x,), bw)


# -- reductions --------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(data, (x,), bw)


def mean(x, axis=None, keepdims=False):
    """Mean over ``axis`` (all axes by default)."""
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / count)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


def layer_norm(x, gain=None, bias=None, eps=1e-6):
    """Normalize over the last axis, then apply an optional affine map."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    for p, label in ((gain, "gain"), (bias, "bias")):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm {label} shape {p.shape} does not match last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data if gain is not None else g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make(out, parents, bw)


# -- linear algebra and structure -------------------------------------------


def matmul(a, b):
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), bw)


def transpose(x, axes=None):
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from exc
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def gather_rows(x, index):
    """Select rows (the second-to-last axis) by index.

    ``index`` is either a 1-D sequence applied to every leading slice, or a
    ``(B, k)`` array giving a separate selection for each item of a
    ``(B, T, d)`` tensor.
    """
    index = np.asarray(index, dtype=np.intp)
    if x.ndim < 2:
        raise ShapeError(f"gather_rows needs at least 2 dims, got {x.shape}")
    n_rows = x.shape[-2]
    if index.size and (index.min() < -n_rows or index.max() >= n_rows):
        raise IndexError(f"row index out of range for {n_rows} rows")
    if index.ndim == 1:
        data = x.data[..., index, :]

        def bw(g):
            out = np.zeros_like(x.data)
            np.add.at(out, (Ellipsis, index, slice(None)), g)
            return (out,)

    elif index.ndim == 2:
        if x.ndim != 3 or index.shape[0] != x.shape[0]:
            raise ShapeError(f"batched index {index.shape} does not fit tensor {x.shape}")
        rows = np.arange(x.shape[0])[:, None]
        data = x.data[rows, index]

        def bw(g):
            out = np.zeros_like(x.data)
            np.add.at(out, (rows, index), g)
            return (out,)

    else:
        raise ShapeError(f"index must be 1-D or 2-D, got shape {index.shape}")
    return _make(data, (x,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tensors, bw)


def detach(x):
    return Tensor(x.data)


# -- backward ----------------------------------------------------------------


def graph_nodes(root):
    """Nodes reachable from ``root`` that carry gradients, in creation order."""
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph_nodes(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
