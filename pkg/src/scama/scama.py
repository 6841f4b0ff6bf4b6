"""Chunk-level token-count prediction and the gating it drives.

The predictor reads the encoder output of one chunk (rows concatenated into a
single vector) and classifies how many output tokens start inside that chunk.
During training the ground-truth counts decide which chunks the decoder may
attend to at each step; at inference the predictor's argmax does.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .module import Module
from .tensor import Tensor, concat, cross_entropy_smoothed, glorot, matmul, relu, softmax_lastdim

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.2


def splice_chunk(chunk_out, c: int, d_model: int) -> np.ndarray:
    """Concatenate the rows of one chunk's encoder output, right-padding to ``c * d_model``."""
    rows = np.asarray(chunk_out.data if isinstance(chunk_out, Tensor) else chunk_out)
    if rows.ndim != 2 or rows.shape[1] != d_model:
        raise ValueError(f"expected a (c_k, {d_model}) chunk, got {rows.shape}")
    if rows.shape[0] > c:
        raise ValueError(f"chunk has {rows.shape[0]} rows but chunk size is {c}")
    out = np.zeros(c * d_model, dtype=rows.dtype)
    out[: rows.size] = rows.reshape(-1)
    return out


def splice_batch(enc: Tensor, lengths: np.ndarray, c: int) -> Tensor:
    """Spliced chunks for a padded ``(B, T, d)`` encoder output -> ``(B, n_chunks, c*d)``.

    Frames beyond each utterance's length are zeroed so a ragged final chunk
    matches :func:`splice_chunk`.
    """
    B, T, d = enc.shape
    n_chunks = -(-T // c)
    valid = (np.arange(n_chunks * c)[None, :] < np.asarray(lengths)[:, None]).astype(enc.dtype)
    if n_chunks * c > T:
        enc = concat([enc, Tensor(np.zeros((B, n_chunks * c - T, d), dtype=enc.dtype))], axis=1)
    enc = enc * valid[:, :, None]
    return enc.reshape(B, n_chunks, c * d)


class Predictor(Module):
    """Two-layer MLP over a spliced chunk: ``softmax(relu(h W1 + b1) W2 + b2)``."""

    def __init__(self, chunk_size: int, d_model: int, d_hid: int, n_classes: int, rng, dtype=np.float64):
        self.chunk_size = chunk_size
        self.d_model = d_model
        self.W1 = glorot((chunk_size * d_model, d_hid), rng, dtype)
        self.b1 = Tensor(np.zeros(d_hid, dtype=dtype), requires_grad=True)
        self.W2 = glorot((d_hid, n_classes), rng, dtype)
        self.b2 = Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True)

    @property
    def n_classes(self) -> int:
        return self.W2.shape[1]

    def logits(self, spliced) -> Tensor:
        if not isinstance(spliced, Tensor):
            spliced = Tensor(np.asarray(spliced, dtype=self.W1.dtype))
        return matmul_any(relu(matmul_any(spliced, self.W1) + self.b1), self.W2) + self.b2


def matmul_any(x: Tensor, w: Tensor) -> Tensor:
    if x.ndim == 1:
        return matmul(x.reshape(1, -1), w).reshape(-1)
    return matmul(x, w)


def predictor_forward(spliced, p: Predictor) -> Tensor:
    """Distribution over token counts ``0..C_max`` for one (or many) spliced chunks."""
    return softmax_lastdim(p.logits(spliced))


def _check_labels(n: int, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) != n:
        raise ValueError(f"got {n} predictions but {labels.size} chunk labels")
    return labels


def predictor_loss(probs: Tensor, labels) -> Tensor:
    """``-sum_k log p_k[t_k]`` summed over the chunks of one utterance.

    ``probs`` is ``(n_chunks, C_max + 1)``; ``labels`` are class indices
    (equivalently, the positions of the one-hot targets).
    """
    if probs.ndim != 2:
        raise ValueError(f"expected (n_chunks, classes) probabilities, got {probs.shape}")
    labels = _check_labels(probs.shape[0], labels)
    picked = probs[np.arange(len(labels)), labels]
    return -(picked.log().sum())


def predictor_loss_from_logits(logits: Tensor, labels, weights=None) -> Tensor:
    """Same sum as :func:`predictor_loss`, computed stably from logits."""
    return cross_entropy_smoothed(logits, labels, 0.0, weights=weights, reduction="sum")


def joint_loss(l_e2e, l_pred, alpha: float = DEFAULT_ALPHA):
    """``L = L_e2e + alpha * L_pred``."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        return l_e2e
    return l_e2e + l_pred * alpha


@dataclass(frozen=True)
class GateSchedule:
    """Highest visible chunk index per decoder step.

    ``steps[l]`` belongs to the (l+1)-th real token; ``eos_chunk`` is used for
    the end-of-sentence step that follows them.
    """

    steps: tuple[int, ...]
    eos_chunk: int

    def full(self) -> list[int]:
        return list(self.steps) + [self.eos_chunk]

    def __len__(self) -> int:
        return len(self.steps)


def counts_to_gate_schedule(counts) -> GateSchedule:
    counts = [int(n) for n in counts]
    if any(n < 0 for n in counts):
        raise ValueError(f"token counts must be non-negative: {counts}")
    steps: list[int] = []
    for k, n in enumerate(counts):
        steps.extend([k] * n)
    return GateSchedule(tuple(steps), max(len(counts) - 1, 0))


def gate_allowed(schedule: GateSchedule, n_frames: int, c: int, n_positions: int | None = None) -> np.ndarray:
    """Boolean ``(positions, n_frames)`` cross-attention mask from a gate schedule.

    Positions past the tokens (eos step, then padding) see the eos chunk.
    """
    full = schedule.full()
    n_positions = len(full) if n_positions is None else n_positions
    limit = np.full(n_positions, min(n_frames, (schedule.eos_chunk + 1) * c))
    for i, m in enumerate(full[:n_positions]):
        limit[i] = min(n_frames, (m + 1) * c)
    return np.arange(n_frames)[None, :] < limit[:, None]


def derive_chunk_labels(spans, c: int, T: int, c_max: int | None = None) -> list[int]:
    """Per-chunk token counts from per-token ``(start, end)`` frame spans (1-based, inclusive).

    Each token is assigned to the chunk holding its first frame.  With
    ``c_max`` given, larger counts are clipped (and a warning is logged).
    """
    if c < 1 or T < 1:
        raise ValueError("chunk size and length must be positive")
    n_chunks = -(-T // c)
    counts = [0] * n_chunks
    prev_start = 0
    for start, end in spans:
        if not (1 <= start <= end <= T):
            raise ValueError(f"span ({start}, {end}) outside [1, {T}]")
        if start < prev_start:
            raise ValueError(f"span starting at {start} precedes the previous one at {prev_start}")
        prev_start = start
        counts[(start - 1) // c] += 1
    if c_max is not None and max(counts, default=0) > c_max:
        log.warning("chunk token count %d exceeds C_max=%d; clipping", max(counts), c_max)
        counts = [min(n, c_max) for n in counts]
    return counts


def one_hot_counts(counts, c_max: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    out = np.zeros((len(counts), c_max + 1))
    out[np.arange(len(counts)), np.minimum(counts, c_max)] = 1.0
    return out
