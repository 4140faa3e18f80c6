"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough of an autograd engine for two small attention GNNs, a tiny
MLP and an MSE loss: each op records a backward closure on its output
when any input is tracked, and ``Tensor.backward()`` replays the tape in
reverse topological order.  Arrays are 2-D or 3-D (a leading head axis
for batched attention); everything is float64.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Populate ``grad`` on every tracked tensor reachable from this scalar."""
        if self.data.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward called on an untracked tensor")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _make(data, parents) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = True
    out._parents = parents
    out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # out-of-place add: the stored array may alias an upstream grad
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None
    if not _tracked(a, b):
        return Tensor(data)
    out = _make(data, (a, b))

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from None
    if not _tracked(a, b):
        return Tensor(data)
    out = _make(data, (a, b))

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    if not _tracked(a, b):
        return Tensor(data)
    out = _make(data, (a, b))

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = _bw
    return out


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    data = a.data * s
    if not _tracked(a):
        return Tensor(data)
    out = _make(data, (a,))

    def _bw():
        _accum(a, out.grad * s)

    out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)
    if not _tracked(a, b):
        return Tensor(data)
    out = _make(data, (a, b))

    def _bw():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape))

    out._backward = _bw
    return out


# ------------------------------------------------------------ shape plumbing


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        data = np.swapaxes(a.data, -1, -2)
    else:
        data = np.transpose(a.data, axes)
    if not _tracked(a):
        return Tensor(data)
    out = _make(data, (a,))

    def _bw():
        g = out.grad
        if axes is None:
            _accum(a, np.swapaxes(g, -1, -2))
        else:
            _accum(a, np.transpose(g, np.argsort(axes)))

    out._backward = _bw
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    if not _tracked(a):
        return Tensor(data)
    orig = a.data.shape
    out = _make(data, (a,))

    def _bw():
        _accum(a, out.grad.reshape(orig))

    out._backward = _bw
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracked(*tensors):
        return Tensor(data)
    out = _make(data, tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def _bw():
        g = out.grad
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                _accum(t, g[tuple(idx)])
            offset += size

    out._backward = _bw
    return out


def gather_rows(a, indices) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]
    if not _tracked(a):
        return Tensor(data)
    out = _make(data, (a,))

    def _bw():
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, out.grad)
        _accum(a, ga)

    out._backward = _bw
    return out


# -------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return Tensor(data)
    out = _make(data, (a,))
    src_shape = a.data.shape

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, src_shape))

    out._backward = _bw
    return out


def mean(a) -> Tensor:
    """Mean over all entries, as a scalar."""
    a = _as_tensor(a)
    size = a.data.size
    if size == 0:
        return Tensor(0.0)
    data = np.asarray(a.data.mean())
    if not _tracked(a):
        return Tensor(data)
    out = _make(data, (a,))

    def _bw():
        _accum(a, np.full(a.data.shape, float(out.grad) / size))

    out._backward = _bw
    return out


def rows_l2norm(a, eps: float = 1e-30) -> Tensor:
    """L2 norm of each row along the last axis, keepdims; smoothed at zero."""
    a = _as_tensor(a)
    sq = (a.data * a.data).sum(axis=-1, keepdims=True)
    data = np.sqrt(sq + eps)
    if not _tracked(a):
        return Tensor(data)
    out = _make(data, (a,))

    def _bw():
        _accum(a, out.grad * a.data / data)

    out._backward = _bw
    return out


# ------------------------------------------------------------ nonlinearities


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)
    if not _tracked(a):
        return Tensor(data)
    out = _make(data, (a,))

    def _bw():
        _accum(a, out.grad * mask)

    out._backward = _bw
    return out


def _softmax_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)
    if not _tracked(a):
        return Tensor(data)
    out = _make(data, (a,))

    def _bw():
        _accum(a, _softmax_backward(out.data, out.grad))

    out._backward = _bw
    return out


def masked_softmax_rows(a, mask) -> Tensor:
    """Row softmax restricted to entries where ``mask`` is True.

    Masked entries get probability 0; rows with no active entry come out
    all-zero.  ``mask`` is a plain boolean array broadcastable to ``a``.
    """
    a = _as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    neg = np.where(m, a.data, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(neg - rowmax)
    tot = e.sum(axis=-1, keepdims=True)
    data = e / np.where(tot == 0.0, 1.0, tot)
    if not _tracked(a):
        return Tensor(data)
    out = _make(data, (a,))

    def _bw():
        # masked entries have y == 0, so their gradient vanishes
        _accum(a, _softmax_backward(out.data, out.grad))

    out._backward = _bw
    return out


def dropout(a, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity outside training or at p == 0."""
    a = _as_tensor(a)
    if not train or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng stream")
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    data = a.data * keep
    if not _tracked(a):
        return Tensor(data)
    out = _make(data, (a,))

    def _bw():
        _accum(a, out.grad * keep)

    out._backward = _bw
    return out
