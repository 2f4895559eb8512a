"""Minimal dense tensors with tape-based reverse-mode differentiation.

Values are float64 numpy arrays. A ``Tensor`` produced by an operation keeps
references to its parents and a closure mapping the output cotangent to the
parent cotangents; ``backward`` replays those closures in reverse
topological order. Only leaves (tensors with ``requires_grad`` and no parents)
keep a ``grad`` buffer, and it accumulates across calls until ``zero_grad``.

Broadcasting is limited to scalar-with-tensor so every backward rule stays
readable.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericalError, ParameterError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- introspection -------------------------------------------------
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
    def is_leaf(self):
        return not self._parents

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self):
        self.grad = None

    # -- differentiation -----------------------------------------------
    def backward(self):
        """Populate ``grad`` on every reachable leaf with d(self)/d(leaf)."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        cotangents = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = cotangents.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in cotangents:
                    cotangents[key] = cotangents[key] + pg
                else:
                    cotangents[key] = pg

    # -- operator sugar --------------------------------------------------
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
        if isinstance(other, Tensor):
            raise UsageError("division is only supported by a python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def square(self):
        return square(self)

    def silu(self):
        return silu(self)

    def sigmoid(self):
        return sigmoid(self)


def _topological_order(root):
    order = []
    seen = set()
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    _check_finite(data, op)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _check_finite(data, op):
    # Fail at the op that broke finiteness rather than at the loss.
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite value produced by {op}")


# -- elementwise binary ------------------------------------------------------

def _binary_shapes(a, b, op):
    if a.shape == b.shape:
        return None
    if a.ndim == 0:
        return "a"
    if b.ndim == 0:
        return "b"
    raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, scalar_side, side):
    return g.sum() if scalar_side == side else g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sc = _binary_shapes(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, sc, "a"), _unbroadcast(g, sc, "b")

    return _make(out, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sc = _binary_shapes(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, sc, "a"), _unbroadcast(-g, sc, "b")

    return _make(out, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sc = _binary_shapes(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, sc, "a") if a.requires_grad else None
        gb = _unbroadcast(g * a.data, sc, "b") if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


# -- elementwise unary -------------------------------------------------------

def square(x):
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def _sigmoid(v):
    return expit(v)


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _make(out, (x,), backward, "silu")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ParameterError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def power(x, exponent):
    """``x ** exponent`` for a python scalar exponent and positive x."""
    x = as_tensor(x)
    exponent = float(exponent)
    if exponent == 1.0:
        return x
    out = np.power(x.data, exponent)

    def backward(g):
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return _make(out, (x,), backward, "power")


def clamp_min(x, floor):
    """max(x, floor); zero gradient where the floor is active."""
    x = as_tensor(x)
    keep = x.data >= floor
    out = np.where(keep, x.data, floor)
    return _make(out, (x,), lambda g: (g * keep,), "clamp_min")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "silu": silu,
    "square": square,
    "sigmoid": sigmoid,
}


def elementwise(op, *operands):
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# -- reductions and shape ------------------------------------------------------

def tensor_sum(x, axis=None):
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def tensor_mean(x, axis=None):
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return tensor_sum(x, axis) * (1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=()):
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def take(x, index):
    """Basic/advanced indexing with scatter-add backward."""
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=np.float64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), backward, "take")


def stack(tensors):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mixed shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors])
    return _make(out, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is ``[k, n]`` or has the same leading axes
    as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def weighted_sum(coeffs, candidates):
    """sum_b coeffs[b] * candidates[b] for a 1-d coefficient tensor.

    ``candidates`` is a constant array of shape ``[n, ...]``; only ``coeffs``
    can carry gradient.
    """
    coeffs = as_tensor(coeffs)
    cands = np.asarray(candidates, dtype=np.float64)
    if coeffs.ndim != 1 or cands.shape[0] != coeffs.shape[0]:
        raise DimensionError(
            f"weighted_sum: {coeffs.shape[0] if coeffs.ndim else 'scalar'} coefficients "
            f"for {cands.shape[0]} candidates"
        )
    out = np.tensordot(coeffs.data, cands, axes=1)

    def backward(g):
        return (np.tensordot(cands.reshape(cands.shape[0], -1), g.reshape(-1), axes=1),)

    return _make(out, (coeffs,), backward, "weighted_sum")


# -- normalisation and probabilities --------------------------------------------

def softmax(x, temperature=1.0, axis=-1, mask=None):
    """Softmax of ``x / temperature`` along ``axis``.

    ``mask`` (boolean, broadcastable to x) marks entries that are kept; the
    rest get probability exactly zero. Every slice must keep at least one.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z -= z.max(axis=axis, keepdims=True)
    y = np.exp(z, out=z)
    y /= y.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner) / temperature,)

    return _make(y, (x,), backward, "softmax")


def softmax_rows(x, temperature=1.0):
    return softmax(x, temperature=temperature, axis=-1)


def rms_norm(x, gain, eps=1e-6):
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise DimensionError(f"rms_norm gain {gain.shape} does not match last axis of {x.shape}")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    n = x.data * r
    out = n * gain.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gy = g * gain.data
            gx = r * (gy - n * (gy * n).mean(axis=-1, keepdims=True))
        gg = (g * n).reshape(-1, x.shape[-1]).sum(axis=0) if gain.requires_grad else None
        return gx, gg

    return _make(out, (x, gain), backward, "rms_norm")


def embedding(table, ids):
    """Row lookup ``table[ids]`` for an integer array of ids."""
    ids = np.asarray(ids)
    return take(as_tensor(table), ids)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    logits = as_tensor(logits)
    targets = np.asarray(targets).reshape(-1)
    flat = logits.data.reshape(-1, logits.shape[-1])
    if flat.shape[0] != targets.shape[0]:
        raise DimensionError(f"{flat.shape[0]} logit rows for {targets.shape[0]} targets")
    z = flat - flat.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(targets.shape[0])
    nll = logsum - z[rows, targets]
    out = nll.mean()

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, targets] -= 1.0
        return ((g / targets.shape[0]) * p.reshape(logits.shape),)

    return _make(out, (logits,), backward, "cross_entropy")


def leaves_with_grad(*roots):
    """Leaves reachable from ``roots`` that currently hold a grad buffer."""
    found = []
    seen = set()
    for root in roots:
        for node in _topological_order(root) if root.requires_grad else [root]:
            if node.is_leaf and node.grad is not None and id(node) not in seen:
                seen.add(id(node))
                found.append(node)
    return found
