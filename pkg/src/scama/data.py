"""Synthetic transduction data, the stacking/downsampling front end, masking, and CER."""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .model import SPECIALS, Example
from .scama import derive_chunk_labels

_ALPHABET = string.ascii_lowercase + string.ascii_uppercase + string.digits


def symbol_table(vocab_size: int) -> list[str]:
    """``<sos>``, ``<eos>``, then single-character symbols."""
    n = vocab_size - len(SPECIALS)
    if n > len(_ALPHABET):
        raise ValueError(f"at most {len(_ALPHABET)} symbols supported")
    return list(SPECIALS) + list(_ALPHABET[:n])


def to_text(ids: Sequence[int], vocab_size: int) -> str:
    table = symbol_table(vocab_size)
    return " ".join(table[i] for i in ids)


@dataclass
class SyntheticUtterance:
    frames: np.ndarray  # (T_raw, d_raw)
    tokens: list[int]
    spans: list[tuple[int, int]]  # 1-based inclusive raw-frame spans


@dataclass
class GeneratorConfig:
    vocab_size: int = 32
    min_tokens: int = 4
    max_tokens: int = 12
    min_span: int = 4
    max_span: int = 10
    min_gap: int = 1
    max_gap: int = 4
    edge_silence: int = 4
    d_raw: int = 8
    noise: float = 0.3


def token_patterns(seed: int, n_symbols: int, d_raw: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919])
    return rng.normal(size=(n_symbols, d_raw))


def generate_dataset(seed: int, n_utts: int, gen: GeneratorConfig | None = None) -> list[SyntheticUtterance]:
    """Utterances of token-specific mean patterns plus noise, separated by silence.

    Each token is drawn from the real symbols (ids >= 2), occupies a span of
    ``min_span..max_span`` raw frames filled with its pattern plus Gaussian
    noise, and is followed by ``min_gap..max_gap`` frames of noisy silence.
    """
    gen = gen or GeneratorConfig()
    n_symbols = gen.vocab_size - len(SPECIALS)
    if n_symbols < 4:
        raise ValueError("need at least 4 symbols besides <sos>/<eos>")
    patterns = token_patterns(seed, n_symbols, gen.d_raw)
    rng = np.random.default_rng(seed)
    utts = []
    for _ in range(n_utts):
        n = int(rng.integers(gen.min_tokens, gen.max_tokens + 1))
        tokens = [int(t) + len(SPECIALS) for t in rng.integers(0, n_symbols, size=n)]
        means, spans = [], []
        pos = int(rng.integers(1, gen.edge_silence + 1))
        means.append(np.zeros((pos, gen.d_raw)))
        for i, tok in enumerate(tokens):
            width = int(rng.integers(gen.min_span, gen.max_span + 1))
            spans.append((pos + 1, pos + width))
            means.append(np.repeat(patterns[tok - len(SPECIALS)][None], width, axis=0))
            pos += width
            gap = int(rng.integers(gen.min_gap, gen.max_gap + 1)) if i < n - 1 else int(rng.integers(1, gen.edge_silence + 1))
            means.append(np.zeros((gap, gen.d_raw)))
            pos += gap
        mean = np.concatenate(means)
        frames = mean + gen.noise * rng.normal(size=mean.shape)
        utts.append(SyntheticUtterance(frames, tokens, spans))
    return utts


def generate_splits(seed: int, n_train: int, n_dev: int, n_test: int, gen: GeneratorConfig | None = None):
    """Train/dev/test partition of one generated pool; a pure function of ``seed``."""
    utts = generate_dataset(seed, n_train + n_dev + n_test, gen)
    return utts[:n_train], utts[n_train : n_train + n_dev], utts[n_train + n_dev :]


@dataclass(frozen=True)
class FrontEndConfig:
    left: int = 3
    right: int = 3
    downsample: int = 3
    d_raw: int = 8

    @property
    def stacked_dim(self) -> int:
        return (self.left + 1 + self.right) * self.d_raw

    @classmethod
    def filterbank80(cls) -> "FrontEndConfig":
        """80-dim filterbanks, 3+1+3 stacking, 10 ms -> 60 ms frame rate."""
        return cls(3, 3, 6, 80)


def stack_and_downsample(frames: np.ndarray, cfg: FrontEndConfig, spans=None):
    """Stack ``left + 1 + right`` neighbouring frames and keep every ``downsample``-th.

    Missing context at the edges replicates the first/last frame.  Kept frames
    are raw indices 1, 1+f, 1+2f, ... (1-based), so ``T = ceil(T_raw / f)``.
    A raw 1-based frame r maps to model frame ``(r - 1) // f + 1``.
    """
    frames = np.asarray(frames)
    T_raw, d = frames.shape
    if T_raw < 1:
        raise ValueError("need at least one frame")
    if d != cfg.d_raw:
        raise ValueError(f"expected {cfg.d_raw}-dim frames, got {d}")
    keep = np.arange(0, T_raw, cfg.downsample)
    offsets = np.arange(-cfg.left, cfg.right + 1)
    idx = np.clip(keep[:, None] + offsets[None, :], 0, T_raw - 1)
    stacked = frames[idx].reshape(len(keep), -1)
    if spans is None:
        return stacked, None
    f = cfg.downsample
    remapped = [((s - 1) // f + 1, (e - 1) // f + 1) for s, e in spans]
    return stacked, remapped


def spec_augment_lite(frames: np.ndarray, n_freq_masks: int, F: int, n_time_masks: int, T_mask: int, rng: np.random.Generator) -> np.ndarray:
    """Zero random channel bands (width <= F) and time bands (width <= T_mask)."""
    frames = np.array(frames, copy=True)
    T, d = frames.shape
    if n_freq_masks and F >= d:
        raise ValueError(f"frequency mask width {F} must be below {d}")
    if n_time_masks and T_mask >= T:
        raise ValueError(f"time mask width {T_mask} must be below {T}")
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, F + 1))
        s = int(rng.integers(0, d - w + 1))
        frames[:, s : s + w] = 0.0
    for _ in range(n_time_masks):
        w = int(rng.integers(0, T_mask + 1))
        s = int(rng.integers(0, T - w + 1))
        frames[s : s + w, :] = 0.0
    return frames


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(ref: Sequence, hyp: Sequence) -> float:
    """(substitutions + insertions + deletions) / len(ref); can exceed 1."""
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(ref, hyp) / len(ref)


def corpus_cer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    errors = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    return errors / sum(len(r) for r in refs)


def to_example(utt: SyntheticUtterance, frontend: FrontEndConfig, c: int, augment=None) -> Example:
    raw = utt.frames if augment is None else augment(utt.frames)
    stacked, spans = stack_and_downsample(raw, frontend, utt.spans)
    counts = derive_chunk_labels(spans, c, len(stacked))
    return Example(stacked, list(utt.tokens), counts, tuple(spans))


def max_chunk_count(utts: Sequence[SyntheticUtterance], frontend: FrontEndConfig, c: int) -> int:
    return max(max(to_example(u, frontend, c).counts) for u in utts)


# ---------------------------------------------------------------------------
# dataset files


def write_dataset(directory, splits: dict[str, Sequence[SyntheticUtterance]], blob_name: str = "features.bin") -> None:
    """Write ``<split>.tsv`` index files plus one shared feature blob.

    Index lines: ``utt_id <TAB> blob#array <TAB> tokens <TAB> spans`` with
    tokens as space-separated ids and spans as ``start-end`` pairs.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for split, utts in splits.items():
        lines = []
        for i, u in enumerate(utts):
            uid = f"{split}-{i:05d}"
            arrays[uid] = u.frames
            toks = " ".join(map(str, u.tokens))
            spans = " ".join(f"{s}-{e}" for s, e in u.spans)
            lines.append(f"{uid}\t{blob_name}#{uid}\t{toks}\t{spans}\n")
        (directory / f"{split}.tsv").write_text("".join(lines))
    container.save(directory / blob_name, arrays)


def read_dataset(index_path) -> list[SyntheticUtterance]:
    index_path = Path(index_path)
    blobs: dict[str, dict[str, np.ndarray]] = {}
    utts = []
    for lineno, line in enumerate(index_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            _, ref, toks, spans = line.split("\t")
            blob, name = ref.split("#", 1)
            tokens = [int(t) for t in toks.split()]
            span_list = [tuple(int(v) for v in s.split("-")) for s in spans.split()]
        except ValueError as exc:
            raise ValueError(f"{index_path}:{lineno}: malformed dataset record") from exc
        if blob not in blobs:
            blobs[blob] = container.load(index_path.parent / blob)
        if len(tokens) != len(span_list):
            raise ValueError(f"{index_path}:{lineno}: {len(tokens)} tokens but {len(span_list)} spans")
        utts.append(SyntheticUtterance(blobs[blob][name].astype(np.float64), tokens, span_list))
    return utts
