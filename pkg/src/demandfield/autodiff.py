"""Minimal reverse-mode automatic differentiation on numpy arrays.

Just enough tensor ops to express the demand surface, its analytic
elasticities, and the training losses.  Everything is float64.  A node only
records parents when some parent requires gradients, so evaluation-mode
forwards build no graph.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad=None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- helpers -------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    @staticmethod
    def as_tensor(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        o = Tensor.as_tensor(other)
        out_data = self.data + o.data

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(g, o.data.shape))

        return Tensor._op(out_data, (self, o), back)

    __radd__ = __add__

    def __mul__(self, other):
        o = Tensor.as_tensor(other)
        out_data = self.data * o.data

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * o.data, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(g * self.data, o.data.shape))

        return Tensor._op(out_data, (self, o), back)

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-Tensor.as_tensor(other))

    def __rsub__(self, other):
        return Tensor.as_tensor(other) + (-self)

    def __truediv__(self, other):
        o = Tensor.as_tensor(other)
        out_data = self.data / o.data

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / o.data, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(-g * self.data / (o.data * o.data), o.data.shape))

        return Tensor._op(out_data, (self, o), back)

    def __rtruediv__(self, other):
        return Tensor.as_tensor(other) / self

    def __pow__(self, exponent: float):
        e = float(exponent)
        out_data = self.data**e

        def back(g):
            if self.requires_grad:
                self._accum(g * e * self.data ** (e - 1.0))

        return Tensor._op(out_data, (self,), back)

    def __matmul__(self, other):
        o = Tensor.as_tensor(other)
        a, b = self.data, o.data
        if not (a.ndim == b.ndim == 2 or (a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0])):
            raise ValueError(f"matmul supports 2D@2D or equal-batch 3D@3D, got {a.shape} @ {b.shape}")
        out_data = a @ b

        def back(g):
            if self.requires_grad:
                self._accum(g @ np.swapaxes(b, -1, -2))
            if o.requires_grad:
                o._accum(np.swapaxes(a, -1, -2) @ g)

        return Tensor._op(out_data, (self, o), back)

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def back(g):
            self._accum(g * out_data)

        return Tensor._op(out_data, (self,), back)

    def log(self):
        def back(g):
            self._accum(g / self.data)

        return Tensor._op(np.log(self.data), (self,), back)

    def tanh(self):
        out_data = np.tanh(self.data)

        def back(g):
            self._accum(g * (1.0 - out_data * out_data))

        return Tensor._op(out_data, (self,), back)

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def back(g):
            self._accum(g * (self.data > 0.0))

        return Tensor._op(out_data, (self,), back)

    def softplus(self):
        x = self.data
        out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

        def back(g):
            self._accum(g * expit(x))

        return Tensor._op(out_data, (self,), back)

    def huber(self, delta: float):
        """Elementwise Huber: quadratic inside ``delta``, linear outside."""
        d = float(delta)
        r = self.data
        small = np.abs(r) <= d
        out_data = np.where(small, 0.5 * r * r, d * (np.abs(r) - 0.5 * d))

        def back(g):
            self._accum(g * np.where(small, r, d * np.sign(r)))

        return Tensor._op(out_data, (self,), back)

    def softmax(self):
        """Softmax along the last axis."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out_data = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            self._accum(out_data * (g - inner))

        return Tensor._op(out_data, (self,), back)

    # -- reductions / shaping --------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy())

        return Tensor._op(out_data, (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def back(g):
            self._accum(g.reshape(old))

        return Tensor._op(self.data.reshape(shape), (self,), back)

    def broadcast_to(self, shape):
        old = self.data.shape

        def back(g):
            self._accum(_unbroadcast(g, old))

        return Tensor._op(np.broadcast_to(self.data, shape).copy(), (self,), back)

    def swapaxes(self, ax1: int, ax2: int):
        def back(g):
            self._accum(g.swapaxes(ax1, ax2))

        return Tensor._op(self.data.swapaxes(ax1, ax2), (self,), back)

    def __getitem__(self, key):
        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accum(full)

        return Tensor._op(self.data[key], (self,), back)


# -- free functions ------------------------------------------------------------


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [Tensor.as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def back(g):
        splits = np.cumsum(sizes)[:-1]
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return Tensor._op(out_data, tuple(tensors), back)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.ravel(), g.reshape(-1, table.data.shape[1]))
        table._accum(full)

    return Tensor._op(out_data, (table,), back)


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[b, i, s] = x[b, i, idx[i, s]] for x of shape (B, n, n)."""
    B, n, _ = x.data.shape
    k = idx.shape[1]
    bi = np.arange(B)[:, None, None]
    ii = np.arange(n)[None, :, None]
    jj = idx[None, :, :]
    out_data = x.data[bi, ii, jj]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (np.broadcast_to(bi, (B, n, k)), np.broadcast_to(ii, (B, n, k)), np.broadcast_to(jj, (B, n, k))), g)
        x._accum(full)

    return Tensor._op(out_data, (x,), back)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[b, i, s, :] = x[b, idx[i, s], :] for x of shape (B, n, d)."""
    B, n, d = x.data.shape
    k = idx.shape[1]
    out_data = x.data[:, idx, :]  # (B, n, k, d)

    def back(g):
        flat = np.zeros((B * n, d))
        offsets = (np.arange(B)[:, None] * n + idx.ravel()[None, :]).ravel()
        np.add.at(flat, offsets, g.reshape(B * n * k, d))
        x._accum(flat.reshape(B, n, d))

    return Tensor._op(out_data, (x,), back)
