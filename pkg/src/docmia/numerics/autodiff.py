"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an ndarray and, when any input requires a gradient,
remembers the operation that produced it.  ``backward`` walks the recorded
graph once in reverse topological order.

Parameters may carry an extra leading batch axis (one copy per example);
every op broadcasts over it and reduces gradients back to operand shape, so
per-example gradients come out of a single backward pass.
"""
from __future__ import annotations

from collections.abc import Mapping
from typing import Callable, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float]


class NumericError(FloatingPointError):
    """Raised when a NaN or Inf shows up in values or gradients."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    # never mutate: g may alias another node's buffer
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# operations


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # shared weight: fold the batch axes into one GEMM
                k = a.data.shape[-1]
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _node(
        np.swapaxes(a.data, -1, -2),
        (a,),
        lambda g: _accumulate(a, np.swapaxes(g, -1, -2)),
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(old)))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    return _node(
        np.asarray(a.data.sum()),
        (a,),
        lambda g: _accumulate(a, np.broadcast_to(g, a.data.shape)),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: _accumulate(a, g * mask))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup.

    ``table`` is ``(V, d)`` (shared) or ``(B, V, d)`` (one table per example,
    in which case ``ids`` must be ``(B, ...)``).
    """
    ids = np.asarray(ids, dtype=np.int64)
    per_example = table.data.ndim == 3
    if per_example:
        rows = np.arange(ids.shape[0]).reshape((-1,) + (1,) * (ids.ndim - 1))
        rows = np.broadcast_to(rows, ids.shape)
        out = table.data[rows, ids]
    else:
        out = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        gt = np.zeros_like(table.data)
        if per_example:
            np.add.at(gt, (rows, ids), g)
        else:
            np.add.at(gt, ids, g)
        _accumulate(table, gt)

    return _node(out, (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    ``gain``/``bias`` are ``(d,)`` or ``(B, d)`` for per-example copies.
    """
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    g_data = _expand_vector(gain.data, x.data.ndim)
    b_data = _expand_vector(bias.data, x.data.ndim)

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, _reduce_vector(g * xhat, gain.data.shape))
        if bias.requires_grad:
            _accumulate(bias, _reduce_vector(g, bias.data.shape))
        if x.requires_grad:
            gx = g * g_data
            gx = inv / d * (
                d * gx
                - gx.sum(axis=-1, keepdims=True)
                - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
            )
            _accumulate(x, gx)

    return _node(xhat * g_data + b_data, (x, gain, bias), backward)


def _expand_vector(v: np.ndarray, ndim: int) -> np.ndarray:
    # (B, d) -> (B, 1, ..., d) so it lines up with a (B, T, d) activation
    if v.ndim == 2 and ndim > 2:
        return v.reshape((v.shape[0],) + (1,) * (ndim - 2) + (v.shape[1],))
    return v


def _reduce_vector(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 2:
        return g.reshape(g.shape[0], -1, g.shape[-1]).sum(axis=1)
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of token negative log-likelihoods.

    ``logits`` is ``(..., V)``; ``targets`` and ``weights`` match its leading
    shape.  Zero weights mask padding.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    value = -(weights * picked).sum()

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad,
            targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        _accumulate(logits, g * grad * weights[..., None])

    return _node(np.asarray(value), (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(output: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to the named leaves.

    Leaves that the output does not depend on get exact zeros.
    """
    if output.data.shape != ():
        raise ValueError(f"backward needs a scalar output, got shape {output.data.shape}")
    if not np.isfinite(output.data):
        raise NumericError("non-finite value at the output")
    for t in wrt.values():
        t.grad = None
    order = _topological_order(output) if output.requires_grad else []
    for node in order:
        if node is not output and node._backward is not None:
            node.grad = None
    output.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    grads: dict[str, np.ndarray] = {}
    for name, t in wrt.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
        grads[name] = g
    # drop references held by interior nodes
    for node in order:
        if node._backward is not None:
            node.grad = None
    return grads
