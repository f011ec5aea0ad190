"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps a float64 ndarray and records a backward closure per op. The
op set is exactly what the attention / transformer / diffusion stack needs;
forward passes with ``requires_grad=False`` inputs build no tape.
"""

from __future__ import annotations

import contextlib

import numpy as np

_default_dtype = np.float64


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new Tensors are created with.

    Float32 is an inference-only path: training and gradient checks assume
    float64.
    """
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction -------------------------------------------------------

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward -----------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    # leaf: accumulate into .grad
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        if self._backward is None and self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            self.grad += np.asarray(grad, dtype=np.float64)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = Tensor._make(a.data + b.data, (a, b),
                           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
        return out

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(a.data * b.data, (a, b),
                            lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(a.data / b.data, (a, b),
                            lambda g: (_unbroadcast(g / b.data, a.shape),
                                       _unbroadcast(-g * a.data / (b.data ** 2), b.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self
        return Tensor._make(a.data ** exponent, (a,),
                            lambda g: (g * exponent * a.data ** (exponent - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if a.data.ndim >= 2:
                ga = _unbroadcast_batched(ga, a.shape)
            if b.data.ndim >= 2:
                gb = _unbroadcast_batched(gb, b.shape)
            return ga, gb

        return Tensor._make(np.matmul(a.data, b.data), (a, b), backward)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)
        return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))

    def __getitem__(self, idx):
        a = self

        def backward(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(a.data[idx], (a,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else (
            np.prod([self.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- elementwise ---------------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._make(out_data, (a,), lambda g: (g * out_data,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        return Tensor._make(out_data, (a,), lambda g: (g * 0.5 / out_data,))

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)
        return Tensor._make(out_data, (a,), lambda g: (g * (1.0 - out_data ** 2),))

    def sigmoid(self):
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))
        return Tensor._make(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))

    def silu(self):
        a = self
        s = 1.0 / (1.0 + np.exp(-a.data))
        out_data = a.data * s
        return Tensor._make(out_data, (a,), lambda g: (g * (s + out_data * (1.0 - s)),))

    def relu(self):
        a = self
        keep = a.data > 0
        return Tensor._make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _unbroadcast_batched(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Like _unbroadcast but leaves the last two (matrix) axes alone."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i in range(grad.ndim - 2):
        if shape[i] == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def masked_softmax(logits: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Numerically stable softmax; masked-out positions get exactly zero weight.

    ``mask`` is boolean, broadcastable to ``logits``; True means admissible.
    A row with no admissible entry is an error: callers must apply the
    geometry fallback first.
    """
    x = logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax row with no admissible entries")
        x = np.where(mask, x, -np.inf)
    x_max = np.max(x, axis=axis, keepdims=True)
    if np.isnan(x_max).any() or np.isposinf(x_max).any():
        raise FloatingPointError("non-finite attention logits")
    if np.isneginf(x_max).any():
        raise ValueError("softmax row with no finite entries")
    e = np.exp(x - x_max)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = s * (g - np.sum(g * s, axis=axis, keepdims=True))
        return (gx,)

    return Tensor._make(s, (logits,), backward)
