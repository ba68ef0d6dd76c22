"""Dense-tensor math with reverse-mode automatic differentiation.

The graph is define-by-run: every operation links its output tensor back to
its inputs together with a closure that propagates the upstream gradient.
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into every reachable tensor that requires
them.  Tensors with ``requires_grad=False`` (frozen parameters, constants)
never receive a gradient.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, NonFiniteError, ShapeMismatchError

# Training normally runs in float64; flip to float32 via set_default_dtype.
_DEFAULT_DTYPE = np.float64

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """N-dimensional array node in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    # -- graph traversal -------------------------------------------------

    def backward(self):
        """Populate grads of every reachable tensor that requires them.

        Only valid on scalars (loss values)."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        order = self._topo_order()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _topo_order(self):
        order = []
        visited = set()
        stack = [(self, iter(self._parents))]
        visited.add(id(self))
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in visited and p._needs_grad():
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()
        return order

    def _needs_grad(self):
        return self.requires_grad or self._parents

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _grad_parents(*tensors):
    return tuple(t for t in tensors if t._needs_grad())


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- primitives ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, _parents=_grad_parents(a, b))

    def backward(g):
        if a._needs_grad():
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b._needs_grad():
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, _parents=_grad_parents(a, b))

    def backward(g):
        if a._needs_grad():
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b._needs_grad():
            b._accumulate(-_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, _parents=_grad_parents(a, b))

    def backward(g):
        if a._needs_grad():
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b._needs_grad():
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * c, _parents=_grad_parents(a))

    def backward(g):
        if a._needs_grad():
            a._accumulate(g * c)

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, _parents=_grad_parents(a, b))

    def backward(g):
        if a._needs_grad():
            a._accumulate(g @ b.data.T)
        if b._needs_grad():
            b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.T, _parents=_grad_parents(a))

    def backward(g):
        if a._needs_grad():
            a._accumulate(g.T)

    out._backward = backward
    return out


def tsum(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(), _parents=_grad_parents(a))

    def backward(g):
        if a._needs_grad():
            a._accumulate(np.full_like(a.data, g))

    out._backward = backward
    return out


def tmean(a) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, _parents=_grad_parents(a))

    def backward(g):
        if a._needs_grad():
            a._accumulate(g * y * (1.0 - y))

    out._backward = backward
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y, _parents=_grad_parents(a))

    def backward(g):
        if a._needs_grad():
            a._accumulate(g * (1.0 - y * y))

    out._backward = backward
    return out


def gelu(a) -> Tensor:
    """x * Phi(x) with Phi the standard normal CDF (exact erf form)."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = Tensor(a.data * cdf, _parents=_grad_parents(a))

    def backward(g):
        if a._needs_grad():
            pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
            a._accumulate(g * (cdf + a.data * pdf))

    out._backward = backward
    return out


def softmax(a) -> Tensor:
    """Row-wise softmax over the last dimension, max-shifted for stability."""
    a = as_tensor(a)
    if a.data.shape[-1] < 2:
        raise ContractError("softmax requires last dimension >= 2")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, _parents=_grad_parents(a))

    def backward(g):
        if a._needs_grad():
            dot = (g * p).sum(axis=-1, keepdims=True)
            a._accumulate(p * (g - dot))

    out._backward = backward
    return out


def log_clamped(a, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero where the clamp is active."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, floor)
    out = Tensor(np.log(clamped), _parents=_grad_parents(a))

    def backward(g):
        if a._needs_grad():
            a._accumulate(np.where(a.data > floor, g / clamped, 0.0))

    out._backward = backward
    return out


def dropout(a, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: surviving entries scaled by 1/(1-rate); identity in eval."""
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(mask))


def concat_cols(tensors) -> Tensor:
    """Concatenate 2-D tensors along the last axis."""
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=-1),
        _parents=_grad_parents(*tensors),
    )
    widths = [t.data.shape[-1] for t in tensors]

    def backward(g):
        start = 0
        for t, w in zip(tensors, widths):
            if t._needs_grad():
                t._accumulate(g[..., start : start + w])
            start += w

    out._backward = backward
    return out


def take_rows(table, indices) -> Tensor:
    """Row gather (embedding lookup): out[i] = table[indices[i]]."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(table.data[idx], _parents=_grad_parents(table))

    def backward(g):
        if table._needs_grad():
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            table._accumulate(acc)

    out._backward = backward
    return out


def gather_cols(a, indices) -> Tensor:
    """Per-row column pick: out[i] = a[i, indices[i]]."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx], _parents=_grad_parents(a))

    def backward(g):
        if a._needs_grad():
            acc = np.zeros_like(a.data)
            acc[rows, idx] = g
            a._accumulate(acc)

    out._backward = backward
    return out


def where_rows(cond_rows, a, b) -> Tensor:
    """Per-row select between two [B x D] tensors; cond_rows is a bool [B]."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(cond_rows, dtype=bool).reshape(-1, 1)
    out = Tensor(np.where(m, a.data, b.data), _parents=_grad_parents(a, b))

    def backward(g):
        if a._needs_grad():
            a._accumulate(np.where(m, g, 0.0))
        if b._needs_grad():
            b._accumulate(np.where(m, 0.0, g))

    out._backward = backward
    return out


def masked_max_over_time(steps, valid) -> Tensor:
    """Channel-wise max over a list of [B x D] tensors, restricted to valid steps.

    ``valid`` is a bool array [B x T]; every row must have at least one valid
    step.  Gradient flows to the (first) argmax step of each channel.
    """
    steps = [as_tensor(t) for t in steps]
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (steps[0].data.shape[0], len(steps)):
        raise ShapeMismatchError(
            f"valid mask shape {valid.shape} does not match batch "
            f"{steps[0].data.shape[0]} x {len(steps)} steps"
        )
    if not valid.any(axis=1).all():
        raise ContractError("every sequence needs at least one valid timestep")
    stacked = np.stack([t.data for t in steps], axis=1)  # B x T x D
    masked = np.where(valid[:, :, None], stacked, -np.inf)
    winner = masked.argmax(axis=1)  # B x D
    out = Tensor(
        np.take_along_axis(masked, winner[:, None, :], axis=1)[:, 0, :],
        _parents=_grad_parents(*steps),
    )

    def backward(g):
        for t_idx, t in enumerate(steps):
            if t._needs_grad():
                t._accumulate(np.where(winner == t_idx, g, 0.0))

    out._backward = backward
    return out
