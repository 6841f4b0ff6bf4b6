"""Command-line entry points.

Exit codes:
    0  success
    1  unexpected runtime failure
    2  invalid configuration or usage
    3  checkpoint does not match the configuration or request
    4  malformed chunk record on the stream input
    5  training aborted on a non-finite loss
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .checkpoint import CheckpointMismatch, check_compatible, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .container import ContainerError
from .data import to_example, write_dataset
from .decode import StreamSession, attention_dump, latency_report
from .train import NonFiniteLoss, evaluate, load_splits, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISMATCH = 3
EXIT_BAD_RECORD = 4
EXIT_NONFINITE = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    if not args.config:
        raise CliError(EXIT_CONFIG, "--config is required")
    try:
        return load_config(args.config)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"invalid config: {exc}") from exc


def _checkpoint(args, cfg: RunConfig | None):
    if not args.checkpoint:
        raise CliError(EXIT_CONFIG, "--checkpoint is required")
    try:
        model, stored = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise CliError(EXIT_FAILURE, f"cannot read checkpoint: {exc}") from exc
    except (ContainerError, CheckpointMismatch) as exc:
        raise CliError(EXIT_MISMATCH, f"unusable checkpoint: {exc}") from exc
    if cfg is not None:
        try:
            check_compatible(stored, cfg)
        except CheckpointMismatch as exc:
            raise CliError(EXIT_MISMATCH, str(exc)) from exc
    return model, stored


def _check_chunk(args, model) -> None:
    if args.chunk is not None and args.chunk != model.cfg.chunk_size:
        raise CliError(
            EXIT_MISMATCH,
            f"--chunk {args.chunk} differs from the checkpoint's chunk size {model.cfg.chunk_size}; "
            "the count predictor is tied to the training chunk size",
        )


def _split(cfg: RunConfig, name: str):
    train_utts, dev, test = load_splits(cfg)
    return {"train": train_utts, "dev": dev, "test": test}[name]


def _utterance(cfg: RunConfig, split: str, index: int):
    utts = _split(cfg, split)
    if not 0 <= index < len(utts):
        raise CliError(EXIT_CONFIG, f"--utt {index} out of range for {split} ({len(utts)} utterances)")
    return utts[index]


def cmd_train(args, out: TextIO) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoint or "scama.ckpt")
    metrics_path = Path(args.metrics) if args.metrics else ckpt.with_suffix(".metrics.tsv")
    with metrics_path.open("w") as metrics:
        try:
            result = train(cfg, metrics=metrics)
        except NonFiniteLoss as exc:
            raise CliError(EXIT_NONFINITE, f"training aborted: {exc}") from exc
    save_checkpoint(ckpt, result.model, cfg, result.best_step)
    out.write(
        f"steps={result.steps} best_step={result.best_step} best_dev_loss={result.best_dev_loss:.4f} "
        f"seconds={result.seconds:.1f} c_max={cfg.model.c_max} checkpoint={ckpt} metrics={metrics_path}\n"
    )
    return EXIT_OK


def cmd_eval(args, out: TextIO) -> int:
    cfg = _config(args)
    model, _ = _checkpoint(args, cfg)
    mode = args.mode or "streaming"
    if mode == "streaming":
        _check_chunk(args, model)
        if model.cfg.attention != "scama":
            raise CliError(EXIT_MISMATCH, "streaming mode needs a model trained with attention = scama")
    beam = args.beam or cfg.decode.beam
    utts = _split(cfg, args.split)
    if args.limit:
        utts = utts[: args.limit]
    res = evaluate(model, utts, cfg, mode, beam, forced_counts=args.forced_counts, length_norm=cfg.decode.length_norm)
    out.write(f"mode={mode} beam={beam} {res.summary()}\n")
    return EXIT_OK


def parse_chunk_records(lines: Iterable[str], d_in: int, c: int):
    """Yield ``(index, frames, last)`` from ``index<TAB>n_rows<TAB>values[<TAB>last]`` lines.

    Blank lines are skipped.  Raises ``CliError`` (exit 4) naming the line.
    """
    expected = 0
    closed = False
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")

        def bad(why: str):
            return CliError(EXIT_BAD_RECORD, f"malformed chunk record at line {lineno}: {why}")

        if len(parts) not in (3, 4) or (len(parts) == 4 and parts[3] != "last"):
            raise bad("expected index<TAB>n_rows<TAB>values[<TAB>last]")
        try:
            index, n_rows = int(parts[0]), int(parts[1])
            values = np.array([float(v) for v in parts[2].split()], dtype=np.float64)
        except ValueError:
            raise bad("non-numeric field") from None
        if index != expected:
            raise bad(f"chunk index {index}, expected {expected}")
        if closed:
            raise bad("record after the final chunk")
        if not 1 <= n_rows <= c:
            raise bad(f"n_rows must be in 1..{c}, got {n_rows}")
        if values.size != n_rows * d_in:
            raise bad(f"{values.size} values for {n_rows} rows of {d_in}")
        if not np.all(np.isfinite(values)):
            raise bad("non-finite feature value")
        last = len(parts) == 4
        closed = last or n_rows < c
        expected += 1
        yield index, values.reshape(n_rows, d_in), last


def cmd_stream(args, out: TextIO, stdin: TextIO) -> int:
    cfg = load_config(args.config) if args.config else None
    model, stored = _checkpoint(args, cfg)
    _check_chunk(args, model)
    if model.cfg.attention != "scama":
        raise CliError(EXIT_MISMATCH, "streaming needs a model trained with attention = scama")
    beam = args.beam or (cfg or stored).decode.beam
    session = StreamSession(model, beam)
    source = stdin if args.input in (None, "-") else open(args.input)
    try:
        for index, frames, last in parse_chunk_records(source, model.cfg.d_in, model.cfg.chunk_size):
            new = session.push_chunk(frames, last=last)
            out.write(f"{index}\t{' '.join(map(str, new))}\n")
            out.flush()
    finally:
        if source is not stdin:
            source.close()
    session.finalize()
    hyp = session.result.tokens
    report = latency_report(model.cfg.chunk_size, stored.data.model_frame_ms)
    out.write(f"final\t{' '.join(map(str, hyp))}\tchunks={session.chunks_seen} {report.summary()}\n")
    return EXIT_OK


def cmd_dump_attention(args, out: TextIO) -> int:
    cfg = _config(args)
    model, _ = _checkpoint(args, cfg)
    utt = _utterance(cfg, args.split, args.utt)
    ex = to_example(utt, cfg.data.frontend(), model.cfg.chunk_size)
    tokens, weights, allowed = attention_dump(model, ex.frames, args.beam or 1)
    T = allowed.shape[1]
    sink = open(args.output, "w", newline="") if args.output else out
    try:
        writer = csv.writer(sink, lineterminator="\n")
        writer.writerow(["step", "layer", "head", "token", "visible"] + [f"f{t}" for t in range(T)])
        for layer, w in enumerate(weights):
            for head in range(w.shape[0]):
                for step in range(w.shape[1]):
                    row = [step + 1, layer, head, tokens[step], int(allowed[step].sum())]
                    writer.writerow(row + [f"{v:.8g}" for v in w[head, step]])
    finally:
        if sink is not out:
            sink.close()
    return EXIT_OK


def cmd_generate(args, out: TextIO) -> int:
    cfg = _config(args)
    train_utts, dev, test = load_splits(cfg)
    write_dataset(args.output, {"train": train_utts, "dev": dev, "test": test})
    out.write(f"wrote {len(train_utts)}/{len(dev)}/{len(test)} utterances to {args.output}\n")
    return EXIT_OK


def cmd_export_chunks(args, out: TextIO) -> int:
    """Write one dataset utterance as stream-input chunk records."""
    cfg = _config(args)
    c = args.chunk or cfg.model.chunk_size
    utt = _utterance(cfg, args.split, args.utt)
    frames = to_example(utt, cfg.data.frontend(), c).frames
    chunks = [frames[i : i + c] for i in range(0, len(frames), c)]
    for k, chunk in enumerate(chunks):
        values = " ".join(repr(float(v)) for v in chunk.reshape(-1))
        tail = "\tlast" if args.flag_last and k == len(chunks) - 1 else ""
        out.write(f"{k}\t{len(chunk)}\t{values}{tail}\n")
    return EXIT_OK


def cmd_show_config(args, out: TextIO) -> int:
    out.write(dump_config(_config(args)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scama", description="Streaming chunk-aware attention speech recogniser (toy scale).")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", help="run configuration file")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint path")
        return p

    p = common(sub.add_parser("train", help="train a model and write a checkpoint"))
    p.add_argument("--metrics", help="metrics log path (default: <checkpoint>.metrics.tsv)")

    p = common(sub.add_parser("eval", help="decode a split and report CER and latency"))
    p.add_argument("--mode", choices=("streaming", "offline"))
    p.add_argument("--chunk", type=int)
    p.add_argument("--beam", type=int)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--limit", type=int, default=0, help="only the first N utterances")
    p.add_argument("--forced-counts", action="store_true", help="gate with ground-truth counts")

    p = common(sub.add_parser("stream", help="decode chunk records from a file or stdin"))
    p.add_argument("--input", help="chunk record file, '-' for stdin (default)")
    p.add_argument("--chunk", type=int)
    p.add_argument("--beam", type=int)
    p.add_argument("--mode", choices=("streaming",), default="streaming")

    p = common(sub.add_parser("dump-attention", help="CSV of decoder cross-attention weights"))
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--utt", type=int, default=0)
    p.add_argument("--beam", type=int)
    p.add_argument("--chunk", type=int)
    p.add_argument("--mode", choices=("streaming", "offline"))
    p.add_argument("--output", help="CSV path (default stdout)")

    p = common(sub.add_parser("generate", help="write the synthetic dataset to a directory"), checkpoint=False)
    p.add_argument("--output", required=True)

    p = common(sub.add_parser("export-chunks", help="print one utterance as stream chunk records"), checkpoint=False)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--utt", type=int, default=0)
    p.add_argument("--chunk", type=int)
    p.add_argument("--flag-last", action="store_true", help="mark the final record with 'last'")

    common(sub.add_parser("show-config", help="print the fully resolved configuration"), checkpoint=False)
    return parser


def main(argv=None, out: TextIO | None = None, stdin: TextIO | None = None) -> int:
    out = out or sys.stdout
    stdin = stdin or sys.stdin
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "train": lambda: cmd_train(args, out),
        "eval": lambda: cmd_eval(args, out),
        "stream": lambda: cmd_stream(args, out, stdin),
        "dump-attention": lambda: cmd_dump_attention(args, out),
        "generate": lambda: cmd_generate(args, out),
        "export-chunks": lambda: cmd_export_chunks(args, out),
        "show-config": lambda: cmd_show_config(args, out),
    }
    try:
        return handlers[args.command]()
    except CliError as exc:
        print(f"scama: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"scama: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
