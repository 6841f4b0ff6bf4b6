"""SAN-M / LC-SAN-M encoder, DFSMN decoder and the joint training objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np

from .attention import LayerKVCache, MultiHeadAttention, SANMLayer, FSMNMemory, block_causal_mask, mask_to_bias
from .module import FeedForward, LayerNorm, Linear, Module
from .scama import (
    DEFAULT_ALPHA,
    Predictor,
    counts_to_gate_schedule,
    gate_allowed,
    joint_loss,
    predictor_loss_from_logits,
    splice_batch,
)
from .tensor import Tensor, cross_entropy_smoothed, dropout, embed, glorot, matmul

SOS, EOS = 0, 1
SPECIALS = ("<sos>", "<eos>")

ENCODER_MODES = ("streaming", "offline")
ATTENTION_KINDS = ("scama", "fsa")
DECODER_ORDERS = ("fsmn_first", "attention_first")


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    ``n_encoder``/``n_decoder_att``/``n_decoder_fsmn`` are the N, M and K block
    counts.  ``vocab_size`` includes ``<sos>`` (id 0) and ``<eos>`` (id 1).
    ``c_max`` is the largest per-chunk token count seen in training data.
    """

    d_in: int = 56
    vocab_size: int = 32
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    n_encoder: int = 4
    n_decoder_att: int = 2
    n_decoder_fsmn: int = 1
    chunk_size: int = 5
    mem_look_back: int = 8
    mem_look_ahead: int = 0
    dec_mem_order: int = 4
    dropout: float = 0.1
    c_max: int = 4
    predictor_hidden: int = 0
    encoder_mode: str = "streaming"
    attention: str = "scama"
    memory_source: str = "values"
    decoder_order: str = "fsmn_first"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("d_in", "vocab_size", "d_model", "heads", "d_ff", "n_encoder", "n_decoder_att", "chunk_size", "dec_mem_order")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("n_decoder_fsmn", "mem_look_back", "mem_look_ahead", "c_max", "predictor_hidden"):
            if getattr(self, name) < 0:
                raise ValueError(f"model.{name} must be >= 0, got {getattr(self, name)}")
        if self.vocab_size < len(SPECIALS) + 1:
            raise ValueError("vocab_size must leave room for at least one symbol besides <sos>/<eos>")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        _choice("encoder_mode", self.encoder_mode, ENCODER_MODES)
        _choice("attention", self.attention, ATTENTION_KINDS)
        _choice("memory_source", self.memory_source, ("values", "heads"))
        _choice("decoder_order", self.decoder_order, DECODER_ORDERS)
        if self.encoder_mode == "streaming" and self.mem_look_ahead:
            raise ValueError("a streaming encoder needs mem_look_ahead = 0")
        if self.attention == "scama" and self.encoder_mode != "streaming":
            raise ValueError("scama attention requires the streaming encoder")

    @property
    def d_hid(self) -> int:
        return self.predictor_hidden or self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _choice(name: str, value: str, options: Sequence[str]) -> None:
    if value not in options:
        raise ValueError(f"model.{name} must be one of {list(options)}, got {value!r}")


# ---------------------------------------------------------------------------
# encoder


class EncoderStream:
    """Incremental encoder state for one stream: one KV cache per layer."""

    def __init__(self, encoder: "Encoder"):
        self.encoder = encoder
        self.caches = [LayerKVCache() for _ in encoder.layers]
        self.n_chunks = 0
        self.closed = False

    def push(self, chunk: np.ndarray) -> np.ndarray:
        """Encode one ``(c_k, d_in)`` chunk; returns its ``(c_k, d_model)`` output."""
        c = self.encoder.cfg.chunk_size
        chunk = np.asarray(chunk)
        if chunk.ndim != 2 or chunk.shape[1] != self.encoder.cfg.d_in or not 1 <= chunk.shape[0] <= c:
            raise ValueError(f"chunk must be (1..{c}, {self.encoder.cfg.d_in}), got {chunk.shape}")
        if self.closed:
            raise RuntimeError("a ragged (short) chunk must be the last one in the stream")
        if chunk.shape[0] < c:
            self.closed = True
        x = self.encoder.embed_input(Tensor(chunk[None].astype(self.encoder.dtype)))
        for layer, cache in zip(self.encoder.layers, self.caches):
            x = layer.forward_chunk(x, cache)
        self.n_chunks += 1
        return x.data[0]


class Encoder(Module):
    """Affine input projection with layer norm, then N SAN-M blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.proj = Linear(cfg.d_in, cfg.d_model, rng, dtype=dtype)
        self.ln_in = LayerNorm(cfg.d_model, dtype)
        look_ahead = cfg.mem_look_ahead if cfg.encoder_mode == "offline" else 0
        self.layers = [
            SANMLayer(cfg.d_model, cfg.heads, cfg.d_ff, cfg.mem_look_back, look_ahead, rng, cfg.dropout, cfg.memory_source, dtype)
            for _ in range(cfg.n_encoder)
        ]

    def embed_input(self, frames: Tensor) -> Tensor:
        return self.ln_in(self.proj(frames))

    def __call__(
        self,
        frames,
        lengths=None,
        chunk_size: int | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Encode a padded batch ``(B, T, d_in)``.

        ``chunk_size=None`` uses full-sequence attention; otherwise attention
        is block-causal over chunks of that size.
        """
        frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.dtype))
        B, T, _ = frames.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        key_ok = np.arange(T)[None, :] < lengths[:, None]
        allowed = np.ones((T, T), bool) if chunk_size is None else block_causal_mask(T, chunk_size)
        allowed = allowed[None, :, :] & key_ok[:, None, :]
        bias = mask_to_bias(allowed, self.dtype)[:, None, :, :]
        valid = key_ok[:, :, None].astype(self.dtype)
        x = self.embed_input(frames)
        for layer in self.layers:
            x = layer(x, bias, valid, training, rng)
        return x

    def default_chunk(self) -> int | None:
        return self.cfg.chunk_size if self.cfg.encoder_mode == "streaming" else None

    def start_stream(self) -> EncoderStream:
        return EncoderStream(self)


def chunk_stream(frames: np.ndarray, c: int) -> list[np.ndarray]:
    """Split ``(T, d)`` frames into consecutive chunks of ``c`` rows (last may be short)."""
    return [frames[i : i + c] for i in range(0, len(frames), c)]


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderState:
    """Per-block rolling FSMN histories ``(B, <= L_dec - 1, d)`` plus the last emitted token."""

    history: list[np.ndarray]
    prev: np.ndarray

    def select(self, idx) -> "DecoderState":
        idx = np.asarray(idx, dtype=np.int64)
        return DecoderState([h[idx] for h in self.history], self.prev[idx])

    @property
    def batch(self) -> int:
        return len(self.prev)


class CrossContext:
    """Cross-attention keys/values of the encoder frames released so far, per attention block."""

    def __init__(self, decoder: "Decoder"):
        self.decoder = decoder
        self.rows = np.zeros((0, decoder.cfg.d_model), dtype=decoder.dtype)
        self.kv: list[tuple[np.ndarray, np.ndarray]] = []

    @property
    def n_frames(self) -> int:
        return self.rows.shape[0]

    def extend(self, enc_rows: np.ndarray) -> "CrossContext":
        enc_rows = np.asarray(enc_rows, dtype=self.decoder.dtype)
        self.rows = np.concatenate([self.rows, enc_rows], axis=0)
        new = self.decoder.context_kv(Tensor(enc_rows[None]))
        if not self.kv:
            self.kv = [(k.data, v.data) for k, v in new]
        else:
            self.kv = [
                (np.concatenate([k0, k.data], axis=2), np.concatenate([v0, v.data], axis=2))
                for (k0, v0), (k, v) in zip(self.kv, new)
            ]
        return self

    @classmethod
    def from_encoder(cls, decoder: "Decoder", enc_rows: np.ndarray) -> "CrossContext":
        return cls(decoder).extend(enc_rows)


class DecoderBlock(Module):
    """Unidirectional FSMN sublayer, optional cross-attention, feed-forward; post-norm residuals.

    The FSMN sublayer is ``memory(x W_p)`` with look-back ``L_dec`` and no
    look-ahead.  ``order="attention_first"`` swaps the first two sublayers.
    """

    def __init__(self, cfg: ModelConfig, rng, with_attention: bool, dtype=np.float64):
        d = cfg.d_model
        self.wp = glorot((d, d), rng, dtype)
        self.mem = FSMNMemory(d, cfg.dec_mem_order, 0, rng, dtype)
        self.ln_m = LayerNorm(d, dtype)
        self.cross = MultiHeadAttention(d, cfg.heads, rng, dtype) if with_attention else None
        self.ln_a = LayerNorm(d, dtype) if with_attention else None
        self.ffn = FeedForward(d, cfg.d_ff, rng, dtype)
        self.ln_f = LayerNorm(d, dtype)
        self.dropout_p = cfg.dropout
        self.order = cfg.decoder_order

    def kv(self, enc: Tensor) -> tuple[Tensor, Tensor]:
        return self.cross.split(matmul(enc, self.cross.wk)), self.cross.split(matmul(enc, self.cross.wv))

    def __call__(self, x, kv, bias, training=False, rng=None, history=None):
        """Returns ``(output, fsmn_input, attention_weights)``."""
        weights = None
        p = None

        def fsmn(x):
            nonlocal p
            p = matmul(x, self.wp)
            return self.ln_m(x + dropout(self.mem(p, history), self.dropout_p, rng, training))

        def cross(x):
            nonlocal weights
            q = self.cross.split(matmul(x, self.cross.wq))
            heads, weights = self.cross.attend(q, kv[0], kv[1], bias)
            ctx = matmul(heads, self.cross.wo)
            return self.ln_a(x + dropout(ctx, self.dropout_p, rng, training))

        if self.cross is None:
            x = fsmn(x)
        elif self.order == "fsmn_first":
            x = cross(fsmn(x))
        else:
            x = fsmn(cross(x))
        x = self.ln_f(x + dropout(self.ffn(x), self.dropout_p, rng, training))
        return x, p, weights


class Decoder(Module):
    """Token embedding, M attention-equipped DFSMN blocks, K pure DFSMN blocks, vocabulary projection."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.embedding = glorot((cfg.vocab_size, cfg.d_model), rng, dtype)
        self.blocks = [DecoderBlock(cfg, rng, True, dtype) for _ in range(cfg.n_decoder_att)]
        self.blocks += [DecoderBlock(cfg, rng, False, dtype) for _ in range(cfg.n_decoder_fsmn)]
        self.out = Linear(cfg.d_model, cfg.vocab_size, rng, dtype=dtype)

    def context_kv(self, enc: Tensor) -> list[tuple[Tensor, Tensor]]:
        return [b.kv(enc) for b in self.blocks if b.cross is not None]

    def __call__(self, tokens_in, enc: Tensor, allowed: np.ndarray, training=False, rng=None, return_weights=False):
        """Teacher-forced logits ``(B, L, V)`` for input tokens ``(B, L)``.

        ``allowed`` is the ``(B, L, T)`` boolean cross-attention gate.
        """
        tokens_in = np.asarray(tokens_in, dtype=np.int64)
        bias = mask_to_bias(allowed, self.dtype)[:, None, :, :]
        kvs = iter(self.context_kv(enc))
        x = dropout(embed(self.embedding, tokens_in), self.cfg.dropout, rng, training)
        all_w = []
        for block in self.blocks:
            kv = next(kvs) if block.cross is not None else None
            x, _, w = block(x, kv, bias, training, rng)
            if w is not None:
                all_w.append(w)
        logits = self.out(x)
        return (logits, all_w) if return_weights else logits

    def initial_state(self, batch: int = 1) -> DecoderState:
        hist = [np.zeros((batch, 0, self.cfg.d_model), dtype=self.dtype) for _ in self.blocks]
        return DecoderState(hist, np.full(batch, SOS, dtype=np.int64))

    def step(self, state: DecoderState, context: CrossContext, prev_tokens=None, return_weights=False):
        """One autoregressive step for every row of ``state``.

        Returns logits ``(B, V)`` and the extended state; cross-attention sees
        every frame in ``context``.
        """
        if context.n_frames == 0:
            raise RuntimeError("decoder step needs at least one released encoder frame")
        prev = state.prev if prev_tokens is None else np.asarray(prev_tokens, dtype=np.int64)
        x = embed(self.embedding, prev[:, None])
        kvs = iter(context.kv)
        keep = self.cfg.dec_mem_order - 1
        new_hist, all_w = [], []
        for block, hist in zip(self.blocks, state.history):
            kv = None
            if block.cross is not None:
                k, v = next(kvs)
                kv = (Tensor(k), Tensor(v))
            x, p, w = block(x, kv, None, history=hist)
            joined = np.concatenate([hist, p.data], axis=1)
            new_hist.append(joined[:, max(joined.shape[1] - keep, 0) :] if keep else joined[:, :0])
            if w is not None:
                all_w.append(w)
        logits = self.out(x).data[:, 0, :]
        new_state = DecoderState(new_hist, prev)
        return (logits, new_state, all_w) if return_weights else (logits, new_state)


# ---------------------------------------------------------------------------
# full model


class Example(NamedTuple):
    """One training utterance at the model frame rate."""

    frames: np.ndarray  # (T, d_in)
    tokens: list[int]  # symbol ids, no specials
    counts: list[int]  # tokens starting in each chunk (unclipped)
    spans: tuple = ()  # per-token (start, end) model frames, 1-based


@dataclass
class Batch:
    frames: np.ndarray
    lengths: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray
    tok_weight: np.ndarray
    labels: np.ndarray
    chunk_weight: np.ndarray
    allowed: np.ndarray
    n_tokens: int = 0
    extra: dict = field(default_factory=dict)


def collate(examples: Sequence[Example], cfg: ModelConfig, dtype=np.float64) -> Batch:
    """Pad a list of examples; builds decoder targets and the cross-attention gate."""
    B = len(examples)
    c = cfg.chunk_size
    T = max(len(e.frames) for e in examples)
    L = max(len(e.tokens) for e in examples) + 1
    n_chunks = -(-T // c)
    frames = np.zeros((B, T, cfg.d_in), dtype=dtype)
    lengths = np.zeros(B, dtype=np.int64)
    dec_in = np.full((B, L), EOS, dtype=np.int64)
    dec_out = np.full((B, L), EOS, dtype=np.int64)
    tok_w = np.zeros((B, L), dtype=dtype)
    labels = np.zeros((B, n_chunks), dtype=np.int64)
    chunk_w = np.zeros((B, n_chunks), dtype=dtype)
    allowed = np.zeros((B, L, T), dtype=bool)
    for b, ex in enumerate(examples):
        t, n = len(ex.frames), len(ex.tokens)
        if n == 0:
            raise ValueError("empty target sequence")
        frames[b, :t] = ex.frames
        lengths[b] = t
        dec_in[b, 0] = SOS
        dec_in[b, 1 : n + 1] = ex.tokens
        dec_out[b, :n] = ex.tokens
        tok_w[b, : n + 1] = 1.0
        k = -(-t // c)
        if len(ex.counts) != k:
            raise ValueError(f"example has {len(ex.counts)} chunk counts for {k} chunks")
        labels[b, :k] = np.minimum(ex.counts, cfg.c_max)
        chunk_w[b, :k] = 1.0
        if cfg.attention == "scama":
            sched = counts_to_gate_schedule(ex.counts)
            allowed[b, :, :t] = gate_allowed(sched, t, c, n_positions=L)
        else:
            allowed[b, :, :t] = True
    return Batch(frames, lengths, dec_in, dec_out, tok_w, labels, chunk_w, allowed, int(tok_w.sum()))


class LossParts(NamedTuple):
    total: Tensor
    e2e: Tensor
    pred: Tensor
    pred_correct: int
    pred_total: int

    @property
    def pred_acc(self) -> float:
        return self.pred_correct / max(self.pred_total, 1)


class SCAMAModel(Module):
    """Encoder, decoder and chunk token-count predictor."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = dtype
        self.encoder = Encoder(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        self.predictor = Predictor(cfg.chunk_size, cfg.d_model, cfg.d_hid, cfg.c_max + 1, rng, dtype)

    def astype(self, dtype) -> "SCAMAModel":
        super().astype(dtype)
        self.dtype = self.encoder.dtype = self.decoder.dtype = dtype
        return self

    def encode(self, frames, lengths=None, training=False, rng=None) -> Tensor:
        return self.encoder(frames, lengths, self.encoder.default_chunk(), training, rng)

    def predictor_logits(self, enc: Tensor, lengths) -> Tensor:
        return self.predictor.logits(splice_batch(enc, lengths, self.cfg.chunk_size))

    def losses(
        self,
        batch: Batch,
        alpha: float = DEFAULT_ALPHA,
        smoothing: float = 0.1,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> LossParts:
        """Joint loss for a collated batch.

        ``L_e2e`` is the per-token mean label-smoothed cross entropy;
        ``L_pred`` is summed over the chunks of each utterance and averaged
        over utterances.  Full-sequence-attention models skip ``L_pred``.
        """
        enc = self.encode(batch.frames, batch.lengths, training, rng)
        logits = self.decoder(batch.dec_in, enc, batch.allowed, training, rng)
        l_e2e = cross_entropy_smoothed(logits, batch.dec_out, smoothing, weights=batch.tok_weight)
        p_logits = self.predictor_logits(enc, batch.lengths)
        l_pred = predictor_loss_from_logits(p_logits, batch.labels, batch.chunk_weight) * (1.0 / len(batch.lengths))
        guess = p_logits.data.argmax(axis=-1)
        mask = batch.chunk_weight > 0
        correct = int(((guess == batch.labels) & mask).sum())
        use_alpha = alpha if self.cfg.attention == "scama" else 0.0
        total = joint_loss(l_e2e, l_pred, use_alpha)
        return LossParts(total, l_e2e, l_pred, correct, int(mask.sum()))


def encode_offline(model: SCAMAModel, frames: np.ndarray) -> np.ndarray:
    """Full-sequence encoding of one ``(T, d_in)`` utterance -> ``(T, d_model)``."""
    return model.encoder(np.asarray(frames)[None], chunk_size=None).data[0]


def encode_block_causal(model: SCAMAModel, frames: np.ndarray, c: int | None = None) -> np.ndarray:
    """Batch encoding of one utterance under the block-causal chunk mask."""
    return model.encoder(np.asarray(frames)[None], chunk_size=c or model.cfg.chunk_size).data[0]


def encode_streaming(model: SCAMAModel, stream: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Chunk-by-chunk encoding with per-layer KV caches; one output per chunk."""
    enc = model.encoder.start_stream()
    return [enc.push(chunk) for chunk in stream]


def decoder_step(model: SCAMAModel, state: DecoderState, prev_token: int, context) -> tuple[np.ndarray, DecoderState]:
    """Single-hypothesis step; ``context`` is a :class:`CrossContext` or the visible encoder rows."""
    if not isinstance(context, CrossContext):
        context = CrossContext.from_encoder(model.decoder, np.asarray(context))
    if not 0 <= prev_token < model.cfg.vocab_size:
        raise ValueError(f"token {prev_token} outside the vocabulary")
    logits, new = model.decoder.step(state, context, prev_tokens=np.array([prev_token]))
    return logits[0], new


def e2e_loss(model: SCAMAModel, frames: np.ndarray, targets: Sequence[int], counts=None, smoothing: float = 0.1) -> Tensor:
    """Teacher-forced per-token cross entropy for one utterance.

    ``targets`` must end with ``<eos>``.  With scama attention, ``counts``
    (tokens per chunk) gate the decoder's view of the encoder.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("empty target sequence")
    if targets[-1] != EOS:
        raise ValueError("targets must end with <eos>")
    tokens = targets[:-1]
    if not tokens:
        raise ValueError("target has no symbols before <eos>")
    T = len(frames)
    n_chunks = -(-T // model.cfg.chunk_size)
    if counts is None:
        if model.cfg.attention == "scama":
            raise ValueError("scama attention needs per-chunk token counts")
        counts = [0] * (n_chunks - 1) + [len(tokens)]
    batch = collate([Example(np.asarray(frames), tokens, list(counts))], model.cfg, model.dtype)
    enc = model.encode(batch.frames, batch.lengths)
    logits = model.decoder(batch.dec_in, enc, batch.allowed)
    return cross_entropy_smoothed(logits, batch.dec_out, smoothing, weights=batch.tok_weight)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`SCAMAModel` for ``cfg``."""
    d, f = cfg.d_model, cfg.d_ff
    ln = 2 * d
    ffn = d * f + f + f * d + d
    enc_layer = 4 * d * d + cfg.mem_look_back * d + (cfg.mem_look_ahead if cfg.encoder_mode == "offline" else 0) * d + ffn + 2 * ln
    encoder = cfg.d_in * d + d + ln + cfg.n_encoder * enc_layer
    fsmn_sub = d * d + cfg.dec_mem_order * d + ln
    att_block = fsmn_sub + 4 * d * d + ln + ffn + ln
    pure_block = fsmn_sub + ffn + ln
    decoder = cfg.vocab_size * d + cfg.n_decoder_att * att_block + cfg.n_decoder_fsmn * pure_block + d * cfg.vocab_size + cfg.vocab_size
    predictor = cfg.chunk_size * d * cfg.d_hid + cfg.d_hid + cfg.d_hid * (cfg.c_max + 1) + cfg.c_max + 1
    return encoder + decoder + predictor
