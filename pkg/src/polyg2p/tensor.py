"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node in a dynamic graph; calling ``backward()`` on a
scalar result accumulates gradients into the inputs that require them.  The
graph is pruned at construction time: an operation whose inputs are all
constant carries no backward closure, so a frozen model runs as plain numpy.
"""

from __future__ import annotations

import itertools

import numpy as np

DEFAULT_DTYPE = np.float64

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """A dense array plus an optional position in the differentiation graph."""

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None):
        """Accumulate gradients of this node into every reachable input."""
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=DEFAULT_DTYPE)
        for node in reversed(_topo_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # ---- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named, trainable tensor; freezing removes it from optimization."""

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def freeze(self):
        self.trainable = False
        self.requires_grad = False
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def _topo_order(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _make(data, inputs, backward) -> Tensor:
    parents = tuple(t for t in inputs if t.requires_grad)
    if parents:
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting introduced."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _reduce_leading(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---- arithmetic ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; supports stacked operands with equal leading axes and
    N-d inputs against 2-d weights."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.data.shape} and {b.data.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(g):
        _accumulate(a, _reduce_leading(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accumulate(b, _reduce_leading(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out, (a, b), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)

    return _make(out, tensors, backward)


def index(t: Tensor, key) -> Tensor:
    """Numpy-style indexing (slices, ints, integer arrays) with scatter-add
    backward."""
    out = np.array(t.data[key])

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, key, g)
        _accumulate(t, full)

    return _make(out, (t,), backward)


def reshape(t: Tensor, shape) -> Tensor:
    out = t.data.reshape(shape)

    def backward(g):
        _accumulate(t, g.reshape(t.data.shape))

    return _make(out, (t,), backward)


def swapaxes(t: Tensor, axis1: int, axis2: int) -> Tensor:
    out = np.swapaxes(t.data, axis1, axis2)

    def backward(g):
        _accumulate(t, np.swapaxes(g, axis1, axis2))

    return _make(out, (t,), backward)


def flip(t: Tensor, axis: int) -> Tensor:
    out = np.flip(t.data, axis=axis)

    def backward(g):
        _accumulate(t, np.flip(g, axis=axis))

    return _make(out, (t,), backward)


def sum_(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(t, np.broadcast_to(g, t.data.shape).copy())

    return _make(out, (t,), backward)


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = t.data.size if axis is None else t.data.shape[axis]
    return mul(sum_(t, axis=axis, keepdims=keepdims), 1.0 / n)


# ---- nonlinearities -------------------------------------------------------

def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.data)

    def backward(g):
        _accumulate(t, g * (1.0 - out * out))

    return _make(out, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    out = np.empty_like(t.data)
    pos = t.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t.data[pos]))
    ez = np.exp(t.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        _accumulate(t, g * out * (1.0 - out))

    return _make(out, (t,), backward)


def relu(t: Tensor) -> Tensor:
    out = np.maximum(t.data, 0.0)

    def backward(g):
        _accumulate(t, g * (t.data > 0))

    return _make(out, (t,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(t: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = t.data
    x2 = x * x
    th = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        _accumulate(t, g * local)

    return _make(out, (t,), backward)


def dropout(t: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity when not training or rate is 0."""
    if not train or rate == 0.0:
        return t
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(t.data.shape) >= rate) / (1.0 - rate)
    out = t.data * mask

    def backward(g):
        _accumulate(t, g * mask)

    return _make(out, (t,), backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(t, out * (g - dot))

    return _make(out, (t,), backward)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = t.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: scale/shift must have shape ({d},), got {gamma.data.shape} and {beta.data.shape}")
    mu = t.data.mean(axis=-1, keepdims=True)
    xc = t.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(beta, g.sum(axis=lead))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        dxhat = g * gamma.data
        term = dxhat.mean(axis=-1, keepdims=True) + xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(t, inv * (dxhat - term))

    return _make(out, (t, gamma, beta), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax of ``logits``.

    ``logits`` has shape (..., C); ``labels`` holds class indices of shape
    (...,).  For a single logit vector the gradient is softmax - one_hot.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match logits {logits.data.shape}")
    n_classes = logits.data.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"cross_entropy: label out of range for {n_classes} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    flat = logp.reshape(-1, n_classes)
    flat_labels = labels.reshape(-1)
    n = flat.shape[0]
    out = -flat[np.arange(n), flat_labels].mean()

    def backward(g):
        p = np.exp(flat).copy()
        p[np.arange(n), flat_labels] -= 1.0
        _accumulate(logits, (float(g) / n) * p.reshape(logits.data.shape))

    return _make(out, (logits,), backward)
