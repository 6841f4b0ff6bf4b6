"""Training loop, optimiser and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from .config import RunConfig
from .data import (
    SyntheticUtterance,
    corpus_cer,
    generate_splits,
    max_chunk_count,
    read_dataset,
    spec_augment_lite,
    to_example,
)
from .decode import LatencyReport, decode_full, latency_report, stream_decode
from .model import SCAMAModel, collate
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (scale * m / (np.sqrt(v) + self.eps)).astype(p.data.dtype)


def warmup_lr(step: int, peak: float, warmup: int) -> float:
    """Linear ramp to ``peak`` over ``warmup`` steps, then ``peak * sqrt(warmup / step)``."""
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / (norm + 1e-12)
    return norm


def load_splits(cfg: RunConfig) -> tuple[list, list, list]:
    d = cfg.data
    if d.path:
        from pathlib import Path

        root = Path(d.path)
        return tuple(read_dataset(root / f"{split}.tsv") for split in ("train", "dev", "test"))
    return generate_splits(d.seed, d.n_train, d.n_dev, d.n_test, d.generator(cfg.model.vocab_size))


@dataclass
class TrainResult:
    model: SCAMAModel
    steps: int
    best_step: int
    best_dev_loss: float
    seconds: float
    history: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    dev_history: list[tuple[int, float]] = field(default_factory=list)
    stopped_early: bool = False


def resolve_c_max(cfg: RunConfig, train_utts: Sequence[SyntheticUtterance]) -> None:
    """``c_max = 0`` in the config means: take the largest chunk count in the training data."""
    if cfg.model.c_max == 0:
        cfg.model.c_max = max_chunk_count(train_utts, cfg.data.frontend(), cfg.model.chunk_size)


def dev_loss(model: SCAMAModel, examples, cfg: RunConfig) -> float:
    total, n = 0.0, 0
    bs = cfg.train.batch_size
    with no_grad():
        for i in range(0, len(examples), bs):
            part = examples[i : i + bs]
            parts = model.losses(collate(part, cfg.model, model.dtype), cfg.train.alpha, cfg.train.label_smoothing)
            total += parts.total.item() * len(part)
            n += len(part)
    return total / max(n, 1)


def train(
    cfg: RunConfig,
    splits=None,
    metrics: TextIO | None = None,
    on_eval: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Optimise the joint loss; keeps the parameters with the lowest dev loss."""
    tc = cfg.train
    train_utts, dev_utts, _ = splits if splits is not None else load_splits(cfg)
    resolve_c_max(cfg, train_utts)
    frontend = cfg.data.frontend()
    c = cfg.model.chunk_size
    dtype = np.dtype(tc.dtype).type
    model = SCAMAModel(cfg.model, seed=tc.seed, dtype=dtype)
    opt = Adam(model.parameters(), tc.beta1, tc.beta2, tc.adam_eps)
    rng = np.random.default_rng([tc.seed, 1])

    def augment(frames):
        T, d = frames.shape
        fw = min(tc.freq_width, d - 1)
        tw = min(tc.time_width, T - 1)
        return spec_augment_lite(frames, tc.freq_masks if fw > 0 else 0, fw, tc.time_masks if tw > 0 else 0, tw, rng)

    fixed = None if tc.spec_augment else [to_example(u, frontend, c) for u in train_utts]
    dev_examples = [to_example(u, frontend, c) for u in dev_utts]
    result = TrainResult(model, 0, 0, math.inf, 0.0)
    best_state = model.state_dict()
    best_state = {k: v.copy() for k, v in best_state.items()}
    stale = 0
    start = time.perf_counter()
    order: list[int] = []
    for step in range(1, tc.max_steps + 1):
        if len(order) < tc.batch_size:
            order.extend(rng.permutation(len(train_utts)).tolist())
        idx, order = order[: tc.batch_size], order[tc.batch_size :]
        if fixed is not None:
            batch_ex = [fixed[i] for i in idx]
        else:
            batch_ex = [to_example(train_utts[i], frontend, c, augment) for i in idx]
        batch = collate(batch_ex, cfg.model, dtype)
        model.zero_grad()
        try:
            parts = model.losses(batch, tc.alpha, tc.label_smoothing, training=True, rng=rng)
        except FloatingPointError as exc:
            raise NonFiniteLoss(f"non-finite loss at step {step}: {exc}") from exc
        loss = parts.total.item()
        if not math.isfinite(loss):
            raise NonFiniteLoss(
                f"non-finite loss at step {step}: loss={loss} l_e2e={parts.e2e.item()} l_pred={parts.pred.item()}"
            )
        parts.total.backward()
        clip_grad_norm(opt.params, tc.grad_clip)
        opt.step(warmup_lr(step, tc.lr, tc.warmup_steps))
        row = (step, loss, parts.e2e.item(), parts.pred.item(), parts.pred_acc)
        result.history.append(row)
        if metrics is not None:
            metrics.write(f"{step}\t{loss:.6f}\t{row[2]:.6f}\t{row[3]:.6f}\t{row[4]:.4f}\n")
        result.steps = step
        if step % tc.eval_every == 0 or step == tc.max_steps:
            dl = dev_loss(model, dev_examples, cfg)
            result.dev_history.append((step, dl))
            log.info("step %d dev_loss %.4f", step, dl)
            if on_eval is not None:
                on_eval(step, dl)
            if dl < result.best_dev_loss:
                result.best_dev_loss, result.best_step, stale = dl, step, 0
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
            else:
                stale += 1
                if stale >= tc.patience:
                    result.stopped_early = True
                    break
    model.load_state_dict(best_state)
    result.seconds = time.perf_counter() - start
    return result


@dataclass
class EvalResult:
    cer: float
    n_utts: int
    pred_acc: float | None
    latency: LatencyReport
    refs: list[list[int]]
    hyps: list[list[int]]
    predicted: list[list[int]] = field(default_factory=list)

    def summary(self) -> str:
        acc = "n/a" if self.pred_acc is None else f"{self.pred_acc:.4f}"
        return f"cer={self.cer:.4f} utts={self.n_utts} pred_acc={acc} {self.latency.summary()}"


def evaluate(
    model: SCAMAModel,
    utts: Sequence[SyntheticUtterance],
    cfg: RunConfig,
    mode: str = "streaming",
    beam: int = 1,
    forced_counts: bool = False,
    length_norm: bool = False,
) -> EvalResult:
    """Corpus CER; streaming mode runs each utterance through a stream session."""
    if mode not in ("streaming", "offline"):
        raise ValueError(f"mode must be streaming or offline, got {mode!r}")
    frontend = cfg.data.frontend()
    c = model.cfg.chunk_size
    refs, hyps, predicted = [], [], []
    correct = total = 0
    alignments, emissions = [], []
    for utt in utts:
        ex = to_example(utt, frontend, c)
        refs.append(list(ex.tokens))
        if mode == "offline":
            hyps.append(decode_full(model, ex.frames, beam, full_attention=True, length_norm=length_norm).tokens)
            continue
        forced = ex.counts if forced_counts else None
        sess = stream_decode(model, ex.frames, beam, forced_counts=forced, length_norm=length_norm)
        hyps.append(list(sess.result.tokens))
        predicted.append(list(sess.predicted))
        truth = np.minimum(ex.counts, model.cfg.c_max)
        correct += int((np.asarray(sess.predicted) == truth).sum())
        total += len(truth)
        n = min(len(ex.spans), len(sess.emit_chunks))
        alignments.extend(ex.spans[:n])
        emissions.extend(sess.emit_chunks[:n])
    chunk = c if mode == "streaming" else max((len(to_example(u, frontend, c).frames) for u in utts), default=c)
    report = latency_report(chunk, cfg.data.model_frame_ms, alignments, emissions)
    acc = None if mode == "offline" or forced_counts else correct / max(total, 1)
    return EvalResult(corpus_cer(refs, hyps), len(utts), acc, report, refs, hyps, predicted)
