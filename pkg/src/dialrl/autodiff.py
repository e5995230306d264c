"""Dense-tensor reverse-mode automatic differentiation on numpy arrays.

Each primitive records a closure that propagates exact gradients; `backward`
on a scalar loss runs the tape in reverse topological order. Training runs at
float32, gradient-oracle tests at float64; the math is dtype-agnostic.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Sequence

import numpy as np


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction (inference/sampling hot paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None, _op=""):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._op = _op
        self._backward_ran = False

    # -- plumbing ----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise AutodiffError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_ran:
            raise AutodiffError("backward already ran on this loss; rebuild the graph first")
        self._backward_ran = True
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul_const(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise AutodiffError("tensor/tensor division is unsupported; compose with exp/log")
        return mul_const(self, 1.0 / float(c))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _make(data, parents, backward_fn, op) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward_fn=backward_fn, _op=op)
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw, "mul")


def mul_const(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    out = a.data * c

    def bw(g):
        if a.requires_grad:
            a._accum(g * c)

    return _make(out, (a,), bw, "mul_const")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a._accum(g.reshape(a.shape))

    return _make(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            a._accum(g.transpose(inv))

    return _make(out, (a,), bw, "transpose")


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            a._accum(full)

    return _make(out, (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + n)
                t._accum(g[tuple(sl)])
            offset += n

    return _make(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        for t, gi in zip(tensors, parts):
            if t.requires_grad:
                t._accum(gi)

    return _make(out, tuple(tensors), bw, "stack")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {weight.shape}")
    out = weight.data[ids]

    def bw(g):
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
            weight._accum(gw)

    return _make(out, (weight,), bw, "embedding")


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[...]=a[..., idx[...]]; one gathered element per leading position."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"take_along_last: index shape {idx.shape} != leading {a.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            grids = np.indices(idx.shape, sparse=True)
            full[(*grids, idx)] = g
            a._accum(full)

    return _make(out, (a,), bw, "take_along_last")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if a.requires_grad:
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.shape).copy())

    return _make(out, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul_const(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * out)

    return _make(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _make(out, (a,), bw, "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * (1.0 - out * out))

    return _make(out, (a,), bw, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        if a.requires_grad:
            a._accum(g * out * (1.0 - out))

    return _make(out, (a,), bw, "sigmoid")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0))

    return _make(out, (a,), bw, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU; its exact derivative is used in backward."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + (3 * 0.044715) * x2)
            a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(out, (a,), bw, "gelu")


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def bw(g):
        if a.requires_grad:
            a._accum(g * 2.0 * a.data)

    return _make(out, (a,), bw, "square")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to 1."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            a._accum(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        if a.requires_grad:
            a._accum(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} must match last dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (gx - m1 - xhat * m2))

    return _make(out, (x, gain, bias), bw, "layer_norm")


def cross_entropy_masked(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of `targets` over positions where mask != 0."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=logits.data.dtype)
    if targets.shape != logits.shape[:-1] or mask.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy_masked: targets {targets.shape} / mask {mask.shape} "
            f"must match leading {logits.shape[:-1]}")
    denom = mask.sum()
    if denom <= 0:
        raise AutodiffError("cross_entropy_masked: mask selects no positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray((nll * mask).sum() / denom)

    def bw(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[(*np.indices(targets.shape, sparse=True), targets)] -= 1.0
            logits._accum(g * p * (mask / denom)[..., None])

    return _make(out, (logits,), bw, "cross_entropy_masked")


# ---------------------------------------------------------------------------
# composed losses
# ---------------------------------------------------------------------------

def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=x.data.dtype)
    denom = float(mask.sum())
    if denom <= 0:
        raise AutodiffError("masked_mean: mask selects no positions")
    return tsum(mul(x, Tensor(mask))) / denom


def kl_divergence(p_logits: Tensor, q_logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """KL(p || q) over the last axis from logits; mean over (masked) positions.

    Gradients flow into both operands; detach the one that should stay fixed.
    """
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl_divergence: shapes differ {p_logits.shape} vs {q_logits.shape}")
    logp = log_softmax(p_logits)
    logq = log_softmax(q_logits)
    per_pos = tsum(mul(exp(logp), add(logp, -logq)), axis=-1)
    if mask is None:
        return tmean(per_pos)
    return masked_mean(per_pos, mask)


def squared_error(pred: Tensor, target: Tensor, mask: np.ndarray | None = None) -> Tensor:
    err = square(pred - target)
    if mask is None:
        return tmean(err)
    return masked_mean(err, mask)


def expectile_squared_error(u: Tensor, tau: float, mask: np.ndarray | None = None) -> Tensor:
    """Mean of |tau - 1(u<0)| * u^2; tau=0.5 halves the plain squared error."""
    if not 0.0 < tau < 1.0:
        raise AutodiffError("tau must lie in (0, 1)")
    weights = np.where(u.data < 0, 1.0 - tau, tau).astype(u.data.dtype)
    weighted = mul(square(u), Tensor(weights))
    if mask is None:
        return tmean(weighted)
    return masked_mean(weighted, mask)
