"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every trainable piece of the package (Stage-1 encoder heads, the loss
terms, the audio layer weights and the Stage-2 denoiser) is expressed as a
graph of :class:`Tensor` operations. Calling :meth:`Tensor.backward` on a
scalar walks the recorded graph in reverse topological order and
accumulates gradients into every leaf that has ``requires_grad=True``.

Gradients are verified against central finite differences by
:func:`kpmotion.losses.grad_check`; finite differences are never used on the
training path.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference paths)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class KinkTracker:
    """Records the smallest distance of any non-smooth op argument to its kink."""

    def __init__(self) -> None:
        self.margin = np.inf

    def observe(self, distances: np.ndarray) -> None:
        if distances.size:
            self.margin = min(self.margin, float(np.min(distances)))


@contextlib.contextmanager
def track_kinks():
    prev = getattr(_state, "kinks", None)
    tracker = KinkTracker()
    _state.kinks = tracker
    try:
        yield tracker
    finally:
        _state.kinks = prev


def _observe_kink(distances: np.ndarray) -> None:
    tracker = getattr(_state, "kinks", None)
    if tracker is not None:
        tracker.observe(np.abs(distances))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- construction -----------------------------------------------------
    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        if _grad_enabled() and any(p.requires_grad for p in parents):
            return Tensor(data, True, tuple(parents), backward)
        return Tensor(data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # -- backward ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other),
                            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other),
                            lambda g: (_unbroadcast(g / b, a.shape),
                                       _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        a = self.data
        return Tensor._make(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def back(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(a @ b, (self, other), back)

    # -- reductions / shape -------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        return Tensor._make(np.swapaxes(self.data, a, b), (self,),
                            lambda g: (np.swapaxes(g, a, b),))

    def __getitem__(self, idx):
        shape = self.shape
        basic = _is_basic_index(idx)

        def back(g):
            full = np.zeros(shape)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), back)

    # -- elementwise --------------------------------------------------------
    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (g * 0.5 / y,))

    def sin(self):
        a = self.data
        return Tensor._make(np.sin(a), (self,), lambda g: (g * np.cos(a),))

    def cos(self):
        a = self.data
        return Tensor._make(np.cos(a), (self,), lambda g: (-g * np.sin(a),))

    def sigmoid(self):
        y = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._make(y, (self,), lambda g: (g * y * (1.0 - y),))

    def silu(self):
        a = self.data
        s = 0.5 * (1.0 + np.tanh(0.5 * a))
        return Tensor._make(a * s, (self,), lambda g: (g * (s + a * s * (1.0 - s)),))

    def abs(self):
        a = self.data
        _observe_kink(a)
        return Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def relu(self):
        a = self.data
        _observe_kink(a)
        return Tensor._make(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),))

    def softmax(self, axis: int = -1):
        a = self.data
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)
        return Tensor._make(y, (self,),
                            lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor._make(out, tensors,
                        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return Tensor._make(np.broadcast_to(x.data, shape).copy(), (x,),
                        lambda g: (_unbroadcast(g, src),))


def huber_elementwise(e: Tensor, delta: float) -> Tensor:
    """0.5 e^2 inside |e| <= delta, delta (|e| - delta/2) outside."""
    a = e.data
    _observe_kink(np.abs(a) - delta)
    inside = np.abs(a) <= delta
    out = np.where(inside, 0.5 * a * a, delta * (np.abs(a) - 0.5 * delta))
    return Tensor._make(out, (e,),
                        lambda g: (g * np.where(inside, a, delta * np.sign(a)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm, bt = gamma.data, beta.data
    out = xhat * gm + bt

    def back(g):
        gx_hat = g * gm
        n = a.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(a.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(out, (x, gamma, beta), back)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel temporal convolution with zero 'same' padding.

    ``x`` is (B, T, C), ``weight`` is (k, C) with odd k, ``bias`` is (C,).
    """
    a, w = x.data, weight.data
    k = w.shape[0]
    pad = (k - 1) // 2
    T = a.shape[1]
    xp = np.pad(a, ((0, 0), (pad, pad), (0, 0)))
    out = np.broadcast_to(bias.data, a.shape).copy()
    for j in range(k):
        out += xp[:, j:j + T, :] * w[j]

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for j in range(k):
            gxp[:, j:j + T, :] += g * w[j]
            gw[j] = (g * xp[:, j:j + T, :]).sum(axis=(0, 1))
        return gxp[:, pad:pad + T, :], gw, g.sum(axis=(0, 1))

    return Tensor._make(out, (x, weight, bias), back)


def gather_bias(table: Tensor, index: np.ndarray, valid: np.ndarray) -> Tensor:
    """Look up ``table[:, index]`` (H, T, T); invalid entries give 0 and no gradient."""
    tab = table.data
    n = tab.shape[1]
    out = np.where(valid, tab[:, index], 0.0)
    flat_idx = index[valid]

    def back(g):
        gt = np.empty_like(tab)
        for h in range(tab.shape[0]):
            gt[h] = np.bincount(flat_idx, weights=g[h][valid], minlength=n)
        return (gt,)

    return Tensor._make(out, (table,), back)


def euler_to_rowmatrix(angles: Tensor) -> Tensor:
    """Differentiable (..., 3) yaw/pitch/roll -> (..., 3, 3) row-vector rotation."""
    from kpmotion.kpspace import euler_to_matrix, euler_matrix_derivatives

    a = angles.data
    R = euler_to_matrix(a[..., 0], a[..., 1], a[..., 2])

    def back(g):
        dR = euler_matrix_derivatives(a[..., 0], a[..., 1], a[..., 2])
        return (np.stack([(g * d).sum(axis=(-2, -1)) for d in dR], axis=-1),)

    return Tensor._make(R, (angles,), back)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
