"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a dense ``numpy`` array.  Operations on tensors that
require gradients record their parents and a closure mapping the output
gradient to parent gradients; :meth:`Tensor.backward` walks the recorded graph
in reverse topological order.

Gradients accumulate into leaf tensors across repeated ``backward`` calls until
:meth:`Tensor.zero_grad` is called, mirroring the usual training-loop contract.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "glorot",
    "matmul",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "layer_norm",
    "relu",
    "concat",
    "dropout",
    "embed",
    "cross_entropy_smoothed",
    "tap_filter",
]

_mode = threading.local()
_ids = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None and isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f":
        return np.asarray(data)
    return np.asarray(data, dtype=dtype or np.float64)


class Tensor:
    """Dense array with an optional gradient and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "id")
    __array_ufunc__ = None  # make ``ndarray <op> Tensor`` dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.id = next(_ids)

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
        out = Tensor(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    def backward(self) -> None:
        """Populate ``grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {self.id: np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

    # -- elementwise arithmetic -----------------------------------------
    def __add__(self, other) -> Tensor:
        other = _lift(other, self.dtype)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> Tensor:
        return self + (-_lift(other, self.dtype))

    def __rsub__(self, other) -> Tensor:
        return _lift(other, self.dtype) + (-self)

    def __mul__(self, other) -> Tensor:
        other = _lift(other, self.dtype)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / np.asarray(other, dtype=self.dtype))

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx) -> Tensor:
        x = self

        def bw(g):
            gx = np.zeros_like(x.data)
            if _is_basic_index(idx):
                gx[idx] += g
            else:
                np.add.at(gx, idx, g)
            return (gx,)

        return Tensor._make(x.data[idx], (x,), bw, "getitem")

    # -- shape ops --------------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose"
        )

    def swapaxes(self, a: int, b: int) -> Tensor:
        return Tensor._make(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),), "swapaxes"
        )

    # -- reductions and unary maps --------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        x = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def exp(self) -> Tensor:
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,), "exp")

    def log(self) -> Tensor:
        x = self
        with np.errstate(divide="ignore"):
            y = np.log(x.data)
        return Tensor._make(y, (x,), lambda g: (g / x.data,), "log")

    def relu(self) -> Tensor:
        return relu(self)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def glorot(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Parameter drawn uniformly from +-sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (1, shape[0])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a, None), _lift(b, None)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    flat = b.ndim == 2
    if flat:
        # one GEMM over all leading axes instead of a batched loop
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul")


def _check_finite_rows(m: np.ndarray) -> None:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("softmax row has no finite maximum (all masked or non-finite input)")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis; ``-inf`` entries get weight 0."""
    m = x.data.max(axis=-1, keepdims=True)
    _check_finite_rows(m)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), bw, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    _check_finite_rows(m)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm affine shape mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, ggain, gbias

    return Tensor._make(y, (x, gain, bias), bw, "layer_norm")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._make(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [_lift(t, None) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def concat_lastdim(tensors: Iterable[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scaled by 1/(1-p) while training, identity otherwise."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def embed(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor._make(table.data[ids], (table,), bw, "embed")


def cross_entropy_smoothed(
    logits: Tensor,
    target,
    smoothing: float = 0.0,
    weights=None,
    reduction: str = "mean",
) -> Tensor:
    """Label-smoothed cross entropy from unnormalised logits.

    The target class receives ``1 - smoothing``; the remaining mass is spread
    uniformly over the other ``V - 1`` classes.  ``weights`` (same shape as
    ``target``) zero out padding positions.  ``reduction="mean"`` divides by the
    total weight, ``"sum"`` does not.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {smoothing}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    V = logits.shape[-1]
    if smoothing > 0 and V < 2:
        raise ValueError("label smoothing needs at least two classes")
    target = np.asarray(target, dtype=np.int64)
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    w = np.ones(target.shape, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)

    m = logits.data.max(axis=-1, keepdims=True)
    _check_finite_rows(m)
    shifted = logits.data - m
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    q = np.full(logits.shape, smoothing / (V - 1) if V > 1 else 0.0, dtype=logits.dtype)
    np.put_along_axis(q, target[..., None], 1.0 - smoothing, axis=-1)
    per_tok = -(q * logp).sum(axis=-1)
    norm = w.sum() if reduction == "mean" else 1.0
    if norm == 0:
        raise ValueError("cross entropy over zero weighted positions")
    loss = (per_tok * w).sum() / norm

    def bw(g):
        return ((np.exp(logp) - q) * (w / norm)[..., None] * g,)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def tap_filter(v: Tensor, back: Tensor | None, fwd: Tensor | None = None) -> Tensor:
    """Per-channel tapped delay line along the time axis (axis -2).

    ``out[t] = sum_i back[i] * v[t-i] + sum_j fwd[j] * v[t+1+j]`` with zeros
    outside ``[0, T)``.  ``back`` has shape ``(L_back, d)`` and includes the
    zero-lag tap; ``fwd`` has shape ``(L_ahead, d)``.
    """
    T = v.shape[-2]
    out = np.zeros_like(v.data)
    nb = 0 if back is None else back.shape[0]
    nf = 0 if fwd is None else fwd.shape[0]
    for i in range(min(nb, T)):
        out[..., i:, :] += back.data[i] * v.data[..., : T - i, :]
    for j in range(min(nf, T - 1)):
        out[..., : T - 1 - j, :] += fwd.data[j] * v.data[..., 1 + j :, :]

    def bw(g):
        gv = np.zeros_like(v.data) if v.requires_grad else None
        gb = np.zeros_like(back.data) if back is not None and back.requires_grad else None
        gf = np.zeros_like(fwd.data) if fwd is not None and fwd.requires_grad else None
        for i in range(min(nb, T)):
            if gv is not None:
                gv[..., : T - i, :] += back.data[i] * g[..., i:, :]
            if gb is not None:
                gb[i] = (g[..., i:, :] * v.data[..., : T - i, :]).reshape(-1, v.shape[-1]).sum(axis=0)
        for j in range(min(nf, T - 1)):
            if gv is not None:
                gv[..., 1 + j :, :] += fwd.data[j] * g[..., : T - 1 - j, :]
            if gf is not None:
                gf[j] = (g[..., : T - 1 - j, :] * v.data[..., 1 + j :, :]).reshape(-1, v.shape[-1]).sum(axis=0)
        return gv, gb, gf

    parents = (v, back if back is not None else Tensor(np.zeros(0)), fwd if fwd is not None else Tensor(np.zeros(0)))
    return Tensor._make(out, parents, bw, "tap_filter")
