"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor that requires a gradient receives a monotonically increasing
``node_id`` when it is created.  An operation output is always created after
its inputs, so sorting the nodes reachable from a loss by decreasing id is a
valid reverse topological order.  Each call to :func:`backward` therefore
works on the graph implied by the loss alone; nothing is kept between
training steps.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ConfigError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "relu",
    "scale",
    "sum",
    "mean",
    "max",
    "reshape",
    "transpose",
    "l2_normalize_rows",
    "repeat_rows",
    "repeat_cols",
    "NORM_EPS",
]

NORM_EPS = 1e-12

_node_ids = itertools.count(1)


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise DomainError(f"{what}: non-finite value at index {bad}")


class Tensor:
    """A dense array of float64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "node_id", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if requires_grad else None
        self.grad = None
        self.name = name
        self._parents = ()
        self._vjp = None

    @classmethod
    def _from_op(cls, arr, parents, vjp, what):
        _check_finite(arr, what)
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.node_id = next(_node_ids)
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.node_id = None
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", node_id={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={list(self.shape)}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# -- primitives -------------------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}"
        )
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    # overflow is reported by the finiteness check in _from_op instead
    with np.errstate(over="ignore", invalid="ignore"):
        out = A @ B
    return Tensor._from_op(out, (a, b), vjp, "matmul")


def add(a, b):
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return Tensor._from_op(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def div(a, b):
    _same_shape(a, b, "div")
    A, B = a.data, b.data
    if (B == 0).any():
        idx = tuple(int(i) for i in np.argwhere(B == 0)[0])
        raise DomainError(f"div: zero divisor at index {idx}")
    return Tensor._from_op(A / B, (a, b), lambda g: (g / B, -g * A / (B * B)), "div")


def exp(a):
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    A = a.data
    if (A <= 0).any():
        idx = tuple(int(i) for i in np.argwhere(A <= 0)[0])
        raise DomainError(f"log: non-positive input {A[idx]!r} at index {idx}")
    return Tensor._from_op(np.log(A), (a,), lambda g: (g / A,), "log")


def relu(a):
    # subgradient 0 at exactly 0
    on = a.data > 0
    return Tensor._from_op(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def scale(a, c):
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def _axis(a, axis, op):
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {a.ndim}")
    return axis % a.ndim


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    ax = _axis(a, axis, "sum")
    shape = a.shape

    def vjp(g):
        if ax is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return Tensor._from_op(np.sum(a.data, axis=ax), (a,), vjp, "sum")


def mean(a, axis=None):
    ax = _axis(a, axis, "mean")
    count = a.data.size if ax is None else a.shape[ax]
    return scale(sum(a, axis=ax), 1.0 / count)


def max(a, axis=None):  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the lowest-index maximiser."""
    ax = _axis(a, axis, "max")
    shape = a.shape
    if ax is None:
        flat = int(np.argmax(a.data))

        def vjp(g):
            out = np.zeros(a.data.size)
            out[flat] = float(g)
            return (out.reshape(shape),)

        return Tensor._from_op(np.asarray(a.data.reshape(-1)[flat]), (a,), vjp, "max")

    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)

    def vjp(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, np.expand_dims(g, ax), axis=ax)
        return (out,)

    return Tensor._from_op(np.take_along_axis(a.data, idx, ax).squeeze(ax), (a,), vjp, "max")


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {list(a.shape)} as {list(shape)}")
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return Tensor._from_op(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def l2_normalize_rows(a, eps=NORM_EPS):
    """Divide each row by ``sqrt(sum(row**2) + eps)``.

    Returns ``(normalized, degenerate_rows)`` where ``degenerate_rows`` counts
    rows whose squared norm does not exceed ``eps``; those map to near-zero
    rows instead of raising.
    """
    if a.ndim != 2:
        raise DimensionError(f"l2_normalize_rows: expected rank 2, got {list(a.shape)}")
    X = a.data
    sq = np.sum(X * X, axis=1, keepdims=True)
    r = 1.0 / np.sqrt(sq + eps)
    Y = X * r

    def vjp(g):
        dot = np.sum(g * X, axis=1, keepdims=True)
        return (r * g - X * (r**3) * dot,)

    degenerate = int(np.count_nonzero(sq[:, 0] <= eps))
    return Tensor._from_op(Y, (a,), vjp, "l2_normalize_rows"), degenerate


# -- composites -------------------------------------------------------------


def repeat_rows(v, n):
    """Stack a length-d vector (or 1xd tensor) into an n x d tensor."""
    d = v.data.size
    return matmul(Tensor(np.ones((n, 1))), reshape(v, (1, d)))


def repeat_cols(v, m):
    """Stack a length-n vector into an n x m tensor (column broadcast)."""
    n = v.data.size
    return matmul(reshape(v, (n, 1)), Tensor(np.ones((1, m))))


# -- differentiation ----------------------------------------------------------


def backward(loss, wrt=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Sets ``.grad`` on every requires-grad leaf reachable from ``loss`` and
    returns ``{node_id: Tensor}`` for those leaves.  Tensors listed in
    ``wrt`` that are not reachable receive zero gradients.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = list(loss.shape) if isinstance(loss, Tensor) else type(loss).__name__
        raise ConfigError(f"backward needs a scalar loss, got shape {shape}")

    result = {}
    if loss.requires_grad:
        nodes = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.node_id in nodes:
                continue
            nodes[t.node_id] = t
            stack.extend(p for p in t._parents if p.requires_grad and p.node_id not in nodes)

        grads = {loss.node_id: np.ones_like(loss.data)}
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            g = grads.pop(nid, None)
            if t._vjp is None:
                t.grad = g if g is not None else np.zeros_like(t.data)
                result[nid] = Tensor(t.grad)
                continue
            if g is None:
                continue
            for parent, pg in zip(t._parents, t._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = parent.node_id
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)

    for t in wrt or ():
        if t.node_id not in result:
            t.grad = np.zeros_like(t.data)
            if t.node_id is not None:
                result[t.node_id] = Tensor(t.grad)
    return result


def grad_check(f, x, eps=1e-6):
    """Largest relative error between the analytic and central-difference gradient.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor.  The error of an
    entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    backward(f(probe), wrt=[probe])
    analytic = probe.grad

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = eps
        hi = f(Tensor((flat + step).reshape(base.shape))).item()
        lo = f(Tensor((flat - step).reshape(base.shape))).item()
        numeric = (hi - lo) / (2 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / np.maximum(1.0, abs(numeric))
        worst = np.maximum(worst, err)
    return float(worst)
