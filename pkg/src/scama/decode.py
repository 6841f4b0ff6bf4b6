"""Online decoding: predictor-gated beam search over a chunk stream.

For every chunk the predictor's argmax count decides how many decoder steps
run with cross-attention over the chunks released so far.  On non-final
chunks ``<eos>`` is masked out (the step falls through to the best real
token); on the final chunk ``<eos>`` is allowed and at most ``n_last + 2``
steps run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import EOS, SOS, CrossContext, SCAMAModel, chunk_stream, encode_block_causal, encode_offline
from .scama import predictor_forward, splice_chunk
from .tensor import Tensor, no_grad


def last_chunk_budget(n_last: int) -> int:
    """Total decoder steps allowed while attending the final chunk (eos step included)."""
    return n_last + 2


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def apply_eos_policy(logits: np.ndarray, is_last_chunk: bool, step: int = 1, n_last: int = 0) -> np.ndarray:
    """Log-probabilities to choose from at one decoder step.

    ``<sos>`` is never a valid output.  Outside the last chunk ``<eos>`` is
    masked and the remaining tokens renormalised.  ``step`` is 1-based within
    the last chunk and may not exceed ``n_last + 2``.
    """
    if is_last_chunk and step > last_chunk_budget(n_last):
        raise ValueError(f"step {step} exceeds the last-chunk budget of {last_chunk_budget(n_last)}")
    masked = np.array(logits, dtype=np.float64, copy=True)
    masked[..., SOS] = -np.inf
    if not is_last_chunk:
        masked[..., EOS] = -np.inf
    return _log_softmax(masked)


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    score: float = 0.0
    chunks: list[int] = field(default_factory=list)  # visible chunk per emitted token
    eos: bool = False  # ended by <eos> rather than the step cap

    def extend(self, token: int, logp: float, chunk: int) -> "Hypothesis":
        if token == EOS:
            return Hypothesis(list(self.tokens), self.score + logp, list(self.chunks), True)
        return Hypothesis(self.tokens + [token], self.score + logp, self.chunks + [chunk], False)

    def final_score(self, length_norm: bool = False) -> float:
        if not length_norm:
            return self.score
        return self.score / max(len(self.tokens) + int(self.eos), 1)


class BeamSearch:
    """Length-synchronous beam search whose step budget is set chunk by chunk."""

    def __init__(self, model: SCAMAModel, beam: int = 1, length_norm: bool = False):
        if beam < 1:
            raise ValueError(f"beam width must be >= 1, got {beam}")
        self.model = model
        self.beam = beam
        self.length_norm = length_norm
        self.active = [Hypothesis()]
        self.state = model.decoder.initial_state(1)
        self.finished: list[Hypothesis] = []
        self.steps = 0
        self.eos_steps_in_last = 0
        self.done = False

    def _expand(self, context: CrossContext, chunk: int, last: bool, step: int, n_last: int) -> None:
        logits, state = self.model.decoder.step(self.state, context)
        logp = apply_eos_policy(logits, last, step, n_last)
        self.steps += 1
        cand = np.array([h.score for h in self.active])[:, None] + logp
        V = cand.shape[1]
        order = np.argsort(-cand.reshape(-1), kind="stable")[: self.beam]
        rows, toks, keep = [], [], []
        for idx in order:
            if not np.isfinite(cand.reshape(-1)[idx]):
                break
            row, tok = divmod(int(idx), V)
            hyp = self.active[row].extend(tok, float(logp[row, tok]), chunk)
            if tok == EOS:
                self.finished.append(hyp)
            else:
                rows.append(row)
                toks.append(tok)
                keep.append(hyp)
        self.active = keep
        if keep:
            self.state = state.select(rows)
            self.state.prev = np.asarray(toks, dtype=np.int64)

    def advance(self, context: CrossContext, n_steps: int, chunk: int) -> None:
        """Run ``n_steps`` steps for a non-final chunk (``<eos>`` masked)."""
        if self.done:
            raise RuntimeError("search already finished")
        for _ in range(n_steps):
            self._expand(context, chunk, False, 0, 0)

    def finish(self, context: CrossContext, n_last: int, chunk: int, steps_taken: int = 0) -> Hypothesis:
        """Decode the final chunk with ``<eos>`` allowed, up to ``n_last + 2`` steps in total.

        ``steps_taken`` counts steps already spent on this chunk before it was
        known to be final.
        """
        if self.done:
            raise RuntimeError("search already finished")
        for step in range(steps_taken + 1, last_chunk_budget(n_last) + 1):
            if not self.active:
                break
            if self.finished and not self.length_norm:
                if max(h.score for h in self.finished) >= max(h.score for h in self.active):
                    self.active = []
                    break
            self._expand(context, chunk, True, step, n_last)
        self.finished.extend(self.active)
        self.active = []
        self.done = True
        return self.best()

    def best(self) -> Hypothesis:
        pool = self.finished if self.done else self.active + self.finished
        if not pool:
            return Hypothesis()
        scores = [h.final_score(self.length_norm) for h in pool]
        return pool[int(np.argmax(scores))]

    def committed(self) -> list[int]:
        """Longest prefix shared by every live hypothesis (the best one once finished)."""
        if self.done:
            return list(self.best().tokens)
        seqs = [h.tokens for h in self.active]
        if not seqs:
            return []
        prefix = []
        for column in zip(*seqs):
            if any(t != column[0] for t in column):
                break
            prefix.append(column[0])
        return prefix


class StreamSession:
    """Chunk-by-chunk recogniser for one utterance.

    Each :meth:`push_chunk` runs the encoder layers incrementally, asks the
    predictor how many tokens start in the chunk and advances the beam search
    that many steps.  It returns tokens newly shared by every hypothesis.
    """

    def __init__(self, model: SCAMAModel, beam: int = 1, forced_counts: Sequence[int] | None = None, length_norm: bool = False):
        self.model = model
        self.encoder = model.encoder.start_stream()
        self.context = CrossContext(model.decoder)
        self.search = BeamSearch(model, beam, length_norm)
        self.forced_counts = None if forced_counts is None else list(forced_counts)
        self.predicted: list[int] = []
        self.emitted: list[int] = []
        self.emit_chunks: list[int] = []
        self.finalized = False

    @property
    def chunks_seen(self) -> int:
        return len(self.predicted)

    def _count(self, out: np.ndarray) -> int:
        k = self.chunks_seen
        if self.forced_counts is not None:
            return int(self.forced_counts[k])
        spliced = splice_chunk(out, self.model.cfg.chunk_size, self.model.cfg.d_model)
        return int(np.argmax(predictor_forward(spliced, self.model.predictor).data))

    def push_chunk(self, frames: np.ndarray, last: bool = False) -> list[int]:
        if self.finalized:
            raise RuntimeError("push_chunk after the session was finalised")
        with no_grad():
            out = self.encoder.push(np.asarray(frames, dtype=self.model.dtype))
            self.context.extend(out)
            n = self._count(out)
            k = self.chunks_seen
            self.predicted.append(n)
            if last:
                self.search.finish(self.context, n, k)
                self.finalized = True
            else:
                self.search.advance(self.context, n, k)
        return self._commit(k)

    def finalize(self) -> list[int]:
        """Close the stream; if the last chunk was not flagged, spend its two extra steps now."""
        if not self.finalized:
            self.finalized = True
            if self.chunks_seen:
                with no_grad():
                    n = self.predicted[-1]
                    self.search.finish(self.context, n, self.chunks_seen - 1, steps_taken=n)
            else:
                self.search.done = True
        return self._commit(max(self.chunks_seen - 1, 0))

    def _commit(self, chunk: int) -> list[int]:
        prefix = self.search.committed()
        new = prefix[len(self.emitted) :]
        self.emitted.extend(new)
        self.emit_chunks.extend([chunk] * len(new))
        return new

    @property
    def result(self) -> Hypothesis:
        return self.search.best()


def stream_decode(model: SCAMAModel, frames: np.ndarray, beam: int = 1, forced_counts=None, length_norm=False) -> StreamSession:
    """Feed a whole utterance through a :class:`StreamSession`, flagging the last chunk."""
    sess = StreamSession(model, beam, forced_counts, length_norm)
    chunks = chunk_stream(np.asarray(frames), model.cfg.chunk_size)
    for i, chunk in enumerate(chunks):
        sess.push_chunk(chunk, last=i == len(chunks) - 1)
    return sess


def predicted_counts(model: SCAMAModel, enc: np.ndarray) -> list[int]:
    with no_grad():
        logits = model.predictor_logits(Tensor(enc[None]), np.array([len(enc)]))
    return [int(v) for v in logits.data[0].argmax(axis=-1)]


def decode_gated(model: SCAMAModel, frames: np.ndarray, beam: int = 1, counts=None, length_norm=False) -> Hypothesis:
    """Non-incremental reference: batch block-causal encoding, then the same gated search."""
    with no_grad():
        enc = encode_block_causal(model, frames)
        counts = predicted_counts(model, enc) if counts is None else list(counts)
        search = BeamSearch(model, beam, length_norm)
        ctx = CrossContext(model.decoder)
        c = model.cfg.chunk_size
        n_chunks = -(-len(enc) // c)
        for k in range(n_chunks):
            ctx.extend(enc[k * c : (k + 1) * c])
            if k < n_chunks - 1:
                search.advance(ctx, counts[k], k)
            else:
                search.finish(ctx, counts[k], k)
    return search.best()


def decode_full(model: SCAMAModel, frames: np.ndarray, beam: int = 1, full_attention: bool = True, length_norm=False) -> Hypothesis:
    """Full-sequence-attention decoding: the decoder sees every frame from step 1.

    Decoding stops at ``<eos>`` or after ``T + 2`` steps.
    """
    with no_grad():
        enc = encode_offline(model, frames) if full_attention else encode_block_causal(model, frames)
        search = BeamSearch(model, beam, length_norm)
        ctx = CrossContext.from_encoder(model.decoder, enc)
        return search.finish(ctx, len(enc), 0)


def greedy_gated_decode(model: SCAMAModel, enc: np.ndarray, counts: Sequence[int]) -> list[int]:
    """Plain argmax loop under the chunk gate, one hypothesis, no beam bookkeeping."""
    c = model.cfg.chunk_size
    n_chunks = -(-len(enc) // c)
    state = model.decoder.initial_state(1)
    out: list[int] = []
    with no_grad():
        for k in range(n_chunks):
            ctx = CrossContext.from_encoder(model.decoder, enc[: (k + 1) * c])
            last = k == n_chunks - 1
            budget = last_chunk_budget(counts[k]) if last else counts[k]
            for step in range(1, budget + 1):
                logits, state = model.decoder.step(state, ctx)
                tok = int(np.argmax(apply_eos_policy(logits[0], last, step, counts[k])))
                if tok == EOS:
                    return out
                out.append(tok)
                state.prev = np.array([tok])
    return out


@dataclass
class LatencyReport:
    chunk_size: int
    frame_ms: float
    encoder_latency_ms: float
    delays: list[int]  # frames from a token's aligned end to the end of its emission chunk
    mean_delay: float
    max_delay: int

    def summary(self) -> str:
        return (
            f"encoder_latency_ms={self.encoder_latency_ms:g} "
            f"mean_emission_delay_frames={self.mean_delay:.2f} max_emission_delay_frames={self.max_delay}"
        )


def latency_report(c: int, frame_ms: float, alignments: Sequence[tuple[int, int]] = (), emissions: Sequence[int] = ()) -> LatencyReport:
    """Encoder latency ``c * frame_ms`` and per-token emission delays.

    ``alignments`` are 1-based ``(start, end)`` model frames per reference
    token and ``emissions`` the chunk index at which each token was emitted;
    tokens are paired positionally.
    """
    delays = [(k + 1) * c - end for (_, end), k in zip(alignments, emissions)]
    return LatencyReport(
        c,
        frame_ms,
        c * frame_ms,
        delays,
        float(np.mean(delays)) if delays else 0.0,
        int(max(delays)) if delays else 0,
    )


def attention_dump(model: SCAMAModel, frames: np.ndarray, beam: int = 1):
    """Decode, then replay the hypothesis teacher-forced to collect cross-attention weights.

    Returns ``(tokens, weights, allowed)``: ``tokens`` is the hypothesis
    followed by ``<eos>``, ``weights`` one ``(heads, steps, T)`` array per
    attention block and ``allowed`` the ``(steps, T)`` gate.
    """
    from .scama import counts_to_gate_schedule, gate_allowed

    frames = np.asarray(frames, dtype=model.dtype)
    with no_grad():
        if model.cfg.attention == "scama":
            enc = encode_block_causal(model, frames)
            counts = predicted_counts(model, enc)
            hyp = decode_gated(model, frames, beam, counts)
        else:
            enc = model.encode(frames[None]).data[0]
            hyp = decode_full(model, frames, beam, full_attention=model.cfg.encoder_mode == "offline")
        tokens = list(hyp.tokens) + [EOS]
        L, T = len(tokens), len(enc)
        if model.cfg.attention == "scama":
            allowed = gate_allowed(counts_to_gate_schedule(counts), T, model.cfg.chunk_size, n_positions=L)
        else:
            allowed = np.ones((L, T), dtype=bool)
        dec_in = np.array([[SOS] + tokens[:-1]])
        _, weights = model.decoder(dec_in, Tensor(enc[None]), allowed[None], return_weights=True)
    return tokens, [np.asarray(w)[0] for w in weights], allowed
