"""Multi-head self-attention, FSMN memory, and the (chunked) SAN-M block.

Shapes follow ``(batch, time, channels)``; public helpers also accept a
single ``(time, channels)`` sequence and add the batch axis themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .module import FeedForward, LayerNorm, Module
from .tensor import Tensor, concat, dropout, glorot, matmul, softmax_lastdim, tap_filter

MEMORY_SOURCES = ("values", "heads")


def block_causal_mask(T: int, c: int) -> np.ndarray:
    """Boolean ``T x T`` mask: position t may see s iff chunk(s) <= chunk(t)."""
    if T < 1 or c < 1:
        raise ValueError(f"block_causal_mask needs T, c >= 1 (got T={T}, c={c})")
    chunk = np.arange(T) // c
    return chunk[None, :] <= chunk[:, None]


def mask_to_bias(allowed: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Additive score bias: 0 where allowed, -inf where forbidden."""
    return np.where(allowed, 0.0, -np.inf).astype(dtype)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` heads of width d_model/heads.

    The per-head projections W_i^Q/K/V are stored side by side as one
    ``d_model x d_model`` matrix each; ``wo`` maps the concatenated heads
    (width heads*d_v) back to d_model.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_k = d_model // heads
        self.wq = glorot((d_model, d_model), rng, dtype)
        self.wk = glorot((d_model, d_model), rng, dtype)
        self.wv = glorot((d_model, d_model), rng, dtype)
        self.wo = glorot((heads * self.d_k, d_model), rng, dtype)

    def split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return x.reshape(B, T, self.heads, self.d_k).transpose(0, 2, 1, 3)

    def merge(self, x: Tensor) -> Tensor:
        B, _, T, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, self.heads * self.d_k)

    def attend(self, q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """Per-head attention of split queries over split keys/values.

        Returns the concatenated heads (before ``wo``) and the weights.
        """
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.d_k))
        if bias is not None:
            scores = scores + bias
        weights = softmax_lastdim(scores)
        return self.merge(matmul(weights, v)), weights.data

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        q, k, v = (self.split(matmul(x, w)) for w in (self.wq, self.wk, self.wv))
        heads, _ = self.attend(q, k, v, bias)
        return matmul(heads, self.wo)


def multihead_self_attention(x: Tensor, att: MultiHeadAttention, mask: np.ndarray | None = None) -> Tensor:
    """Self-attention of ``x`` (``T x d`` or ``B x T x d``) under an optional boolean mask."""
    xb, squeeze = _batched(x)
    bias = None if mask is None else mask_to_bias(mask, x.dtype)
    out = att(xb, bias)
    return out.reshape(out.shape[1:]) if squeeze else out


class FSMNMemory(Module):
    """Learnable per-channel tapped-delay memory.

    ``m_t = v_t + sum_{i<look_back} a_i * v_{t-i} + sum_{1<=j<=look_ahead} c_j * v_{t+j}``
    """

    def __init__(self, d: int, look_back: int, look_ahead: int, rng: np.random.Generator, dtype=np.float64):
        if look_back < 0 or look_ahead < 0:
            raise ValueError("memory orders must be non-negative")
        self.look_back = look_back
        self.look_ahead = look_ahead
        self.back = glorot((look_back, d), rng, dtype) if look_back else None
        self.ahead = glorot((look_ahead, d), rng, dtype) if look_ahead else None

    @property
    def history_len(self) -> int:
        return max(self.look_back - 1, 0)

    def __call__(self, v: Tensor, history: np.ndarray | None = None) -> Tensor:
        if history is None or history.shape[-2] == 0:
            return v + tap_filter(v, self.back, self.ahead)
        if self.look_ahead:
            raise ValueError("look-ahead memory cannot be used with streamed history")
        H = history.shape[-2]
        full = concat([Tensor(history.astype(v.dtype, copy=False)), v], axis=-2)
        return (full + tap_filter(full, self.back, None))[..., H:, :]


def fsmn_memory(v: Tensor, mem: FSMNMemory) -> Tensor:
    """Memory output for a whole ``T x d`` (or batched) value sequence, zero padded at the edges."""
    return mem(v)


@dataclass
class LayerKVCache:
    """Accumulated keys/values of one encoder layer for one stream.

    ``keys``/``values`` have shape ``(B, heads, rows, d_k)``; ``mem_history``
    keeps the trailing ``look_back - 1`` memory inputs for the next chunk.
    """

    keys: np.ndarray | None = None
    values: np.ndarray | None = None
    mem_history: np.ndarray | None = None
    n_chunks: int = 0
    chunk_sizes: list[int] = field(default_factory=list)

    @property
    def rows(self) -> int:
        return 0 if self.keys is None else self.keys.shape[2]

    def head_keys(self, i: int) -> np.ndarray:
        return self.keys[0, i]

    def head_values(self, i: int) -> np.ndarray:
        return self.values[0, i]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        self.keys = k if self.keys is None else np.concatenate([self.keys, k], axis=2)
        self.values = v if self.values is None else np.concatenate([self.values, v], axis=2)


class SANMLayer(Module):
    """Self-attention with FSMN memory, then add & norm, feed-forward, add & norm.

    ``memory_source="values"`` feeds the memory with the value projections
    (all heads re-assembled to d_model) before attention weighting;
    ``"heads"`` feeds it the attention-weighted head outputs before ``wo``.
    """

    def __init__(
        self,
        d_model: int,
        heads: int,
        d_ff: int,
        look_back: int,
        look_ahead: int,
        rng: np.random.Generator,
        dropout_p: float = 0.0,
        memory_source: str = "values",
        dtype=np.float64,
    ):
        if memory_source not in MEMORY_SOURCES:
            raise ValueError(f"memory_source must be one of {MEMORY_SOURCES}")
        self.att = MultiHeadAttention(d_model, heads, rng, dtype)
        self.mem = FSMNMemory(d_model, look_back, look_ahead, rng, dtype)
        self.ln1 = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, dtype)
        self.ln2 = LayerNorm(d_model, dtype)
        self.dropout_p = dropout_p
        self.memory_source = memory_source

    def _finish(self, x, y, training, rng):
        x = self.ln1(x + dropout(y, self.dropout_p, rng, training))
        return self.ln2(x + dropout(self.ffn(x), self.dropout_p, rng, training))

    def __call__(
        self,
        x: Tensor,
        bias: np.ndarray | None = None,
        valid: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Full-sequence block.  ``valid`` is a ``(B, T, 1)`` 0/1 frame mask for padding."""
        att = self.att
        q, k, v = (att.split(matmul(x, w)) for w in (att.wq, att.wk, att.wv))
        heads, _ = att.attend(q, k, v, bias)
        src = att.merge(v) if self.memory_source == "values" else heads
        if valid is not None:
            src = src * valid
        y = matmul(heads, att.wo) + self.mem(src)
        return self._finish(x, y, training, rng)

    def forward_chunk(self, x_k: Tensor, cache: LayerKVCache) -> Tensor:
        """One chunk attending over itself and every cached earlier chunk."""
        if self.mem.look_ahead:
            raise ValueError("chunked encoding requires a unidirectional memory (look_ahead=0)")
        att = self.att
        q, k, v = (att.split(matmul(x_k, w)) for w in (att.wq, att.wk, att.wv))
        cache.append(k.data, v.data)
        heads, _ = att.attend(q, Tensor(cache.keys), Tensor(cache.values))
        src = att.merge(v) if self.memory_source == "values" else heads
        hist = cache.mem_history
        m = self.mem(src, hist)
        if self.mem.history_len:
            joined = src.data if hist is None else np.concatenate([hist, src.data], axis=-2)
            cache.mem_history = joined[..., -self.mem.history_len :, :]
        cache.n_chunks += 1
        cache.chunk_sizes.append(x_k.shape[-2])
        y = matmul(heads, att.wo) + m
        return self._finish(x_k, y, False, None)


def san_m_block(x: Tensor, layer: SANMLayer, mask: np.ndarray | None = None) -> Tensor:
    """Offline SAN-M block on ``T x d`` (or batched) input; eval mode."""
    xb, squeeze = _batched(x)
    bias = None if mask is None else mask_to_bias(mask, x.dtype)
    out = layer(xb, bias)
    return out.reshape(out.shape[1:]) if squeeze else out


def lc_attend_chunk(x_k: Tensor, cache: LayerKVCache, layer: SANMLayer, chunk_index: int | None = None):
    """Chunked SAN-M step: returns ``(output, cache)`` with the cache extended in place."""
    if chunk_index is not None and chunk_index != cache.n_chunks:
        raise RuntimeError(f"chunk {chunk_index} presented out of order; expected {cache.n_chunks}")
    xb, squeeze = _batched(x_k)
    out = layer.forward_chunk(xb, cache)
    return (out.reshape(out.shape[1:]) if squeeze else out), cache
