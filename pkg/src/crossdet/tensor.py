"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the detector is a ``Tensor`` wrapping a numpy
array.  Operations record a define-by-run tape: each result keeps references
to its parents plus a closure that routes the incoming gradient to them.
``Tensor.backward`` walks that tape once, in reverse topological order, so a
fresh graph is built per forward pass and replay is deterministic.

Non-finite values are a checked error, never silent: construction from raw
data validates the payload, and the operations that can mint a NaN/Inf from
finite inputs (div, log, sqrt, exp, layer_norm) validate their outputs.  The
remaining ops preserve finiteness at the magnitudes reachable here; training
loops additionally verify every loss value.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf, expit as _expit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, repeated backward, ...)."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    # A single sum is far cheaper than isfinite().all(); any NaN poisons the
    # sum and any Inf survives it, so one scalar check covers both.
    if not math.isfinite(float(arr.sum())):
        raise FloatingPointError(f"non-finite values produced by {what}")


class Tensor:
    """A dense n-dimensional float64 value, optionally tracking gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _checked=False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked:
            _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward
        self._consumed = False

    # -- introspection -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate dself/dleaf into ``grad`` of every tracked ancestor.

        ``self`` must be a scalar attached to the tape; running backward twice
        on the same tensor is an error because the tape is consumed.
        """
        if self.data.size != 1:
            raise GradError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._consumed:
            raise GradError("backward already ran on this tensor; rebuild the graph first")
        if self._backward_fn is None and not self.requires_grad:
            raise GradError("loss is detached from any gradient-tracking computation")

        # Iterative post-order over parent tuples; tuple order makes the
        # traversal (and therefore gradient accumulation order) deterministic.
        topo = []
        visited = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, parents = stack[-1]
            for p in parents:
                if p.requires_grad and id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    break
            else:
                topo.append(node)
                stack.pop()

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        self._consumed = True

    # -- operator sugar ------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, parents, backward, what: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward,
                      _checked=True)
    return Tensor(data, _checked=True)


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    _check_finite(out, "div")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), backward, "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    _check_finite(out, "exp")

    def backward(g):
        _accumulate(x, g * out)

    return _make(out, (x,), backward, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)
    _check_finite(out, "log")

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(out, (x,), backward, "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    _check_finite(out, "sqrt")

    def backward(g):
        _accumulate(x, g * (0.5 / out))

    return _make(out, (x,), backward, "sqrt")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _expit(x.data)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), backward, "sigmoid")


def gelu(x) -> Tensor:
    """Exact erf-based GELU: x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))
    out = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        _accumulate(x, g * (cdf + xd * pdf))

    return _make(out, (x,), backward, "gelu")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.data.shape} @ {b.data.shape}")
    try:
        np.broadcast_shapes(a.data.shape[:-2], b.data.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch extents do not broadcast: {a.data.shape} @ {b.data.shape}") from e
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(out, (a, b), backward, "matmul")


# -- shape manipulation ------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out, (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _make(out, (x,), backward, "transpose")


def concat(xs, axis) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty sequence")
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(x, g[tuple(idx)])

    return _make(out, tuple(xs), backward, "concat")


def repeat(x, times, axis) -> Tensor:
    """REP: repeat every index along ``axis`` ``times`` times."""
    x = as_tensor(x)
    out = np.repeat(x.data, times, axis=axis)
    shape = x.data.shape

    def backward(g):
        folded = g.reshape(shape[:axis] + (shape[axis], times) + shape[axis + 1:])
        _accumulate(x, folded.sum(axis=axis + 1))

    return _make(out, (x,), backward, "repeat")


def take(x, indices, axis=0) -> Tensor:
    """Gather rows along axis 0 (scatter-add on the way back)."""
    if axis != 0:
        raise ShapeError("take is only implemented for axis 0")
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _make(out, (x,), backward, "take")


# -- reductions --------------------------------------------------------------


def _restore_dims(g, shape, axis, keepdims):
    if keepdims or axis is None:
        return np.broadcast_to(g.reshape([1] * len(shape)) if axis is None and not keepdims else g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    expanded = np.expand_dims(g, axes)
    return np.broadcast_to(expanded, shape)


def tensor_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        _accumulate(x, np.ascontiguousarray(_restore_dims(g, x.data.shape, axis, keepdims)))

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / out.size

    def backward(g):
        _accumulate(x, _restore_dims(g, x.data.shape, axis, keepdims) / count)

    return _make(out, (x,), backward, "mean")


def batch_mean_sorted(x) -> Tensor:
    """Mean over axis 0, summing in sorted order.

    Sorting each column before the sum makes the result bitwise invariant to
    any permutation of the rows, which is what lets episode outputs ignore
    the ordering of support images.  The gradient of a mean is uniform, so
    the backward pass needs no unsorting.
    """
    x = as_tensor(x)
    n = x.data.shape[0]
    out = np.sort(x.data, axis=0).sum(axis=0, keepdims=True) / n

    def backward(g):
        _accumulate(x, np.broadcast_to(g / n, x.data.shape).copy())

    return _make(out, (x,), backward, "batch_mean_sorted")


# -- neural-net primitives ----------------------------------------------------


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(x, out * (g - inner))

    return _make(out, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps=1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match channels ({c},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    _check_finite(out, "layer_norm")
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        _accumulate(beta, g.sum(axis=lead))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        gx = g * gamma.data
        _accumulate(
            x,
            inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)),
        )

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def avg_pool2d(x, k, stride=None) -> Tensor:
    """Non-overlapping average pooling over the two middle axes of [B,H,W,C]."""
    stride = k if stride is None else stride
    if stride != k:
        raise ShapeError("avg_pool2d supports non-overlapping windows only (k == stride)")
    x = as_tensor(x)
    b, h, w, c = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d grid {h}x{w} not divisible by window {k}")
    folded = reshape(x, (b, h // k, k, w // k, k, c))
    folded = transpose(folded, (0, 1, 3, 2, 4, 5))
    folded = reshape(folded, (b, h // k, w // k, k * k, c))
    return mean(folded, axis=3)


# -- losses --------------------------------------------------------------------


def smooth_l1(pred, target, beta=1.0) -> Tensor:
    """Elementwise smooth-L1: quadratic inside ``beta``, linear outside."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    e = pred.data - t
    a = np.abs(e)
    out = np.where(a < beta, 0.5 * e * e / beta, a - 0.5 * beta)

    def backward(g):
        _accumulate(pred, g * np.clip(e / beta, -1.0, 1.0))

    return _make(out, (pred,), backward, "smooth_l1")


def binary_cross_entropy(logit, label) -> Tensor:
    """Elementwise BCE on logits, computed in the numerically safe form."""
    logit = as_tensor(logit)
    y = label.data if isinstance(label, Tensor) else np.asarray(label, dtype=np.float64)
    z = logit.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        _accumulate(logit, g * (_expit(z) - y))

    return _make(out, (logit,), backward, "binary_cross_entropy")


def cross_entropy(logits, labels) -> Tensor:
    """Per-row multi-class cross-entropy from logits [N, K] and int labels [N]."""
    logits = as_tensor(logits)
    idx = np.asarray(labels, dtype=np.intp)
    z = logits.data
    if z.ndim != 2 or idx.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy expects [N,K] logits and [N] labels, got {z.shape} / {idx.shape}")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    out = lse - z[np.arange(z.shape[0]), idx]

    def backward(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(z.shape[0]), idx] -= 1.0
        _accumulate(logits, g[:, None] * p)

    return _make(out, (logits,), backward, "cross_entropy")


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
