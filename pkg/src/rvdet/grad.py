"""Minimal reverse-mode autodiff over float64 numpy arrays.

The tape is dynamic: every op records its parents and a backward closure on
the output node; `backward()` walks the DAG once in reverse topological
order. Just enough primitives for the meta-kernel layer, the detection
heads, and the losses.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a caller violates an operation contract."""


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Accumulate gradients of a scalar (or of `seed` . self) into leaves."""
        if seed is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without a seed needs a scalar output, got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        # iterative topological order over the requires_grad subgraph
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(_as_f64(seed))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- arithmetic ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.data.shape} and {b.data.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._from_op(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.data.shape} and {b.data.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(data, (a, b), backward)


def affine(x, w, b) -> Tensor:
    """x @ w + b with bias broadcast over rows."""
    return add(matmul(x, w), b)


def relu(x) -> Tensor:
    x = _wrap(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0.0))

    return Tensor._from_op(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    # split by sign so the exponent is never positive
    pos = x.data >= 0.0
    ex = np.exp(np.where(pos, -x.data, x.data))
    data = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * data * (1.0 - data))

    return Tensor._from_op(data, (x,), backward)


def log(x) -> Tensor:
    x = _wrap(x)
    data = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return Tensor._from_op(data, (x,), backward)


def power(x, p: float) -> Tensor:
    """Elementwise x**p for a python-scalar exponent."""
    x = _wrap(x)
    data = x.data**p

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * p * x.data ** (p - 1.0))

    return Tensor._from_op(data, (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes through only strictly inside (lo, hi)."""
    x = _wrap(x)
    data = np.clip(x.data, lo, hi)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * ((x.data > lo) & (x.data < hi)))

    return Tensor._from_op(data, (x,), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = _wrap(a), _wrap(b)
    try:
        data = np.maximum(a.data, b.data)
    except ValueError:
        raise ShapeError(f"cannot max shapes {a.data.shape} and {b.data.shape}") from None
    take_a = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.data.shape))

    return Tensor._from_op(data, (a, b), backward)


def smooth_l1(x) -> Tensor:
    """0.5 x^2 where |x| < 1, else |x| - 0.5."""
    x = _wrap(x)
    small = np.abs(x.data) < 1.0
    data = np.where(small, 0.5 * x.data**2, np.abs(x.data) - 0.5)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * np.where(small, x.data, np.sign(x.data)))

    return Tensor._from_op(data, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    shapes = [t.data.shape for t in tensors]
    base = list(shapes[0])
    for sh in shapes[1:]:
        if len(sh) != len(base) or any(
            sh[i] != base[i] for i in range(len(base)) if i != axis % len(base)
        ):
            raise ShapeError(f"cannot concat shapes {shapes} along axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [sh[axis] for sh in shapes]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._from_op(data, tensors, backward)


def gather(x, indices) -> Tensor:
    """Select rows of `x` along axis 0; backward scatter-adds."""
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.int64)
    data = x.data[idx]

    def backward(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            np.add.at(acc, idx, g)
            x._accumulate(acc)

    return Tensor._from_op(data, (x,), backward)


def tsum(x, axis=None) -> Tensor:
    x = _wrap(x)
    data = np.sum(x.data, axis=axis)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return Tensor._from_op(data, (x,), backward)


def tmean(x, axis=None) -> Tensor:
    x = _wrap(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return Tensor._from_op(data, (x,), backward)


def grad_check(f, x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a Tensor to a scalar Tensor. The error per coordinate is
    |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    y = f(probe)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    y.backward()
    analytic = (probe.grad if probe.grad is not None else np.zeros_like(probe.data)).ravel()

    flat = x.data.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = float(f(Tensor(bumped.reshape(x.data.shape))).data)
        bumped[i] = flat[i] - eps
        lo = float(f(Tensor(bumped.reshape(x.data.shape))).data)
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
