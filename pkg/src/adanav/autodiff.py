"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the ops the policy graph and its training objectives need:
affine maps, elementwise nonlinearities, masked softmax, clipping, gather,
concatenation, and reductions. Gradients are accumulated by walking the
tape in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[float, int, np.ndarray, "Tensor"]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips building the backward graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        _parents: tuple = (),
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._backward = _backward
        self._parents = _parents

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar tensor."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return add(as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(as_tensor(other), self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return take(self, idx)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _backward=backward, _parents=tuple(parents))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            if a.requires_grad:
                a._accumulate(g @ bd.T)
            if b.requires_grad:
                b._accumulate(ad.T @ g)
        elif ad.ndim == 2 and bd.ndim == 1:
            if a.requires_grad:
                a._accumulate(np.outer(g, bd))
            if b.requires_grad:
                b._accumulate(ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            if a.requires_grad:
                a._accumulate(g @ bd.T)
            if b.requires_grad:
                b._accumulate(np.outer(ad, g))
        elif ad.ndim == 1 and bd.ndim == 1:
            if a.requires_grad:
                a._accumulate(g * bd)
            if b.requires_grad:
                b._accumulate(g * ad)
        else:
            raise ValueError(f"unsupported matmul ranks {ad.ndim} @ {bd.ndim}")

    return _make(out_data, (a, b), backward)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi] (inclusive pass-through)."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    return _make(out_data, (a,), backward)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise min; ties route gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.minimum(a.data, b.data)

    def backward(g):
        mask = a.data <= b.data
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * mask, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * (~mask), b.data.shape))

    return _make(out_data, (a, b), backward)


def tsum(a: ArrayLike, axis=None) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a: ArrayLike, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


def concat(parts: Iterable[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                p._accumulate(g[tuple(sl)])

    return _make(out_data, parts, backward)


def take(a: ArrayLike, idx) -> Tensor:
    """Indexing / gather. Integer-array indices accumulate with scatter-add."""
    a = as_tensor(a)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accumulate(acc)

    return _make(out_data, (a,), backward)


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is treated as a constant,
    which leaves the value and gradient unchanged."""
    a = as_tensor(a)
    shift = as_tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(add(a, mul(shift, -1.0)))
    denom = tsum(e, axis=axis)
    if e.data.ndim > 0 and axis in (-1, e.data.ndim - 1) and denom.data.ndim < e.data.ndim:
        denom = reshape(denom, denom.data.shape + (1,))
    return div(e, denom)


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return mul(a, a)


def logsumexp(a: ArrayLike) -> Tensor:
    """Stable log-sum-exp of a 1-D tensor."""
    a = as_tensor(a)
    m = float(a.data.max())
    return add(log(tsum(exp(add(a, -m)))), m)
