"""Dense float64 tensors with recorded reverse-mode gradients.

Every operation builds the forward value eagerly with numpy and records a
backward closure; calling ``backward()`` on a scalar walks the recorded
graph in reverse topological order. Everything is float64 and
single-threaded, so results are bitwise reproducible given a seed.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

Axis = Union[None, int, tuple]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(RuntimeError):
    """Raised on non-finite values where finiteness is required."""


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # Convenience arithmetic; the free functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])


def _as_const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _as_const(b)
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_const(b)
    out_data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or stacked 3-D operands with equal batch."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.data.ndim != b.data.ndim or (a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]):
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return Tensor(out_data, (a, b), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return Tensor(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return Tensor(out_data, (a,), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)

    return Tensor(out_data, (a,), backward)


def sum_(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out_data, (a,), backward)


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return Tensor(out_data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite differences stay clean."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(a.data * inv_sqrt2))
    out_data = a.data * cdf
    pdf = np.exp(-0.5 * a.data * a.data) / math.sqrt(2.0 * math.pi)

    def backward(g):
        a._accumulate(g * (cdf + a.data * pdf))

    return Tensor(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-stabilized softmax; ``mask`` entries set False get probability exactly 0."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    # All-masked slices would give -inf max; not a supported input.
    e = np.exp(x - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate((g - dot) * out_data)

    return Tensor(out_data, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if a.data.shape[-1] != gain.data.shape[-1] or gain.data.shape != bias.data.shape:
        raise ShapeError(f"layer_norm affine shape mismatch: {a.shape} vs {gain.shape}/{bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv_std
    out_data = xhat * gain.data + bias.data

    def backward(g):
        n = a.data.shape[-1]
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        a._accumulate(term * inv_std)
        red = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=red))
        bias._accumulate(g.sum(axis=red))

    return Tensor(out_data, (a, gain, bias), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood (natural log) over unmasked positions.

    ``logits`` is [T, V]; ``ignore_mask`` marks positions excluded from the loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    t, v = logits.data.shape
    if targets.shape != (t,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {t}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise ValueError(f"target id out of range [0, {v})")
    keep = np.ones(t, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("empty loss support")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = logits.data - m - np.log(z)
    nll = -logp[np.arange(t), targets]
    out_data = np.asarray(nll[keep].mean())

    def backward(g):
        p = e / z
        p[np.arange(t), targets] -= 1.0
        p[~keep] = 0.0
        logits._accumulate(p * (float(g) / n))

    return Tensor(out_data, (logits,), backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather (embedding lookup) with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return Tensor(out_data, (table,), backward)


class Parameter:
    """A named, optionally trainable tensor."""

    __slots__ = ("value", "trainable", "name")

    def __init__(self, value: Tensor, name: str, trainable: bool = True):
        self.value = value
        self.trainable = trainable
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape}, trainable={self.trainable})"


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    Frozen parameters are skipped entirely, leaving their values bitwise
    untouched. Non-finite gradients abort with the parameter path.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-5, beta1: float = 0.9,
                 beta2: float = 0.95, eps: float = 1e-8, weight_decay: float = 0.1):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.value.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.value.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.value.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            if not p.trainable:
                continue
            g = p.value.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {p.name}")
            m = self._m[p.name]
            v = self._v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.value.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps))
            p.value.data -= lr * self.weight_decay * p.value.data


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic gradients of ``f`` and central differences.

    ``f`` must rebuild its graph on each call from the given input tensors.
    """
    for x in inputs:
        x.zero_grad()
    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    worst = 0.0
    for x, a in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(*inputs).item()
            flat[i] = orig - h
            lo = f(*inputs).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            ana = a.reshape(-1)[i]
            denom = max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, abs(ana - numeric) / denom)
    return worst
