"""Dense fp64 tensors with tape-free reverse-mode differentiation.

Every op records its inputs and a vector-Jacobian product closure on the
output tensor. ``backward`` topologically sorts the recorded history,
walks it once in reverse and deposits gradients on leaf tensors that have
``requires_grad`` set. Leaves without it never get a ``grad`` buffer.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError, StateError

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Ops inside the block produce constants with no recorded history."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@dataclass
class Node:
    op: str
    inputs: tuple
    vjp: Optional[Callable[[np.ndarray], tuple]]


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, seed=None):
        backward(Graph.from_output(self), seed)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], op: str, vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}", {"op": op})
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._node = Node(op, tuple(inputs), vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), "add", vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), "sub", vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), "mul", vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _result(a.data * c, (a,), "scale", vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x2 = x.data * x.data
    th = np.tanh(x.data * (_GELU_C + _GELU_C * 0.044715 * x2))
    half_x = 0.5 * x.data
    data = half_x * (1.0 + th)

    def vjp(g):
        du = _GELU_C + (3 * 0.044715 * _GELU_C) * x2
        d = half_x * (1.0 - th * th) * du
        d += 0.5 * (1.0 + th)
        return (g * d,)

    return _result(data, (x,), "gelu", vjp)


# -- linear algebra and shape ops ---------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}") from exc

    if b.ndim == 2:
        # weight matrix shared over leading axes: one GEMM per direction
        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2 if b.requires_grad else None
            return ga, gb
    else:
        def vjp(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            return ga, gb

    return _result(data, (a, b), "matmul", vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: bad axes {axes} for {a.shape}")
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), "transpose", vjp)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {a.shape} -> {shape}") from exc

    def vjp(g):
        return (g.reshape(a.shape),)

    return _result(data, (a,), "reshape", vjp)


def slice_(a: Tensor, idx) -> Tensor:
    data = a.data[idx]
    if not isinstance(data, np.ndarray):
        data = np.array(data)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(data.copy(), (a,), "slice", vjp)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(data), (a,), "sum", vjp)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    data = np.mean(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(data), (a,), "mean", vjp)


# -- normalisation and probability ops ----------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if eps < 0:
        raise ParameterError(f"layer_norm eps must be >= 0, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        return dx, dgamma, dbeta

    return _result(data, (x, gamma, beta), "layer_norm", vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), "softmax", vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def vjp(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), "log_softmax", vjp)


# -- losses --------------------------------------------------------------


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        gd = g * 2.0 * diff / n
        return gd, -gd

    return _result(np.asarray((diff**2).mean()), (a, b), "mse", vjp)


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Batch-mean cross-entropy against label-smoothed one-hot targets."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ParameterError(f"label smoothing must be in [0, 1), got {smoothing}")
    b, c = logits.shape
    target = np.full((b, c), smoothing / c)
    target[np.arange(b), labels] += 1.0 - smoothing
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -(target * logp).sum() / b

    def vjp(g):
        return (g * (np.exp(logp) - target) / b,)

    return _result(np.asarray(loss), (logits,), "cross_entropy", vjp)


# -- graph and backward --------------------------------------------------


@dataclass
class Graph:
    """Topologically ordered history of one output tensor."""

    nodes: list
    output: Tensor
    consumed: bool = field(default=False)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        if not out.requires_grad:
            raise StateError("output has no differentiable history; run a forward pass with grad enabled")
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.inputs:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order, out)

    def node_ids(self):
        return {id(t): i for i, t in enumerate(self.nodes)}


def backward(graph: Graph, seed=None) -> None:
    """Fill ``grad`` on every leaf of ``graph`` that requires it.

    Gradients accumulate into existing buffers. Each graph can be consumed once.
    """
    if graph.consumed:
        raise StateError("graph already consumed by a previous backward pass")
    out = graph.output
    if seed is None:
        if out.size != 1:
            raise DimensionError("seed required for non-scalar output")
        seed = np.ones_like(out.data)
    else:
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed.shape != out.shape:
            raise DimensionError(f"seed shape {seed.shape} != output shape {out.shape}")
    for t in graph.nodes:
        if t._node is not None and t._node.vjp is None:
            raise StateError("graph node was already released by an earlier backward pass")

    pending = {id(out): seed}
    for t in reversed(graph.nodes):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for inp, ig in zip(node.inputs, node.vjp(g)):
            if ig is None or not inp.requires_grad:
                continue
            prev = pending.get(id(inp))
            pending[id(inp)] = ig if prev is None else prev + ig
    for t in graph.nodes:
        if t._node is not None:
            t._node.vjp = None
    graph.consumed = True


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, coords=None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. ``coords``
    restricts the comparison to a subset of flat indices.
    """
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        out.backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad

    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            plus, minus = flat.copy(), flat.copy()
            plus[i] += h
            minus[i] -= h
            try:
                fp = f(Tensor(plus.reshape(x0.shape))).item()
                fm = f(Tensor(minus.reshape(x0.shape))).item()
            except NumericError as exc:
                raise NumericError(f"f is not finite near coordinate {i}") from exc
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"f is not finite near coordinate {i}")
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / (abs(numeric) + 1e-12))
    return worst
