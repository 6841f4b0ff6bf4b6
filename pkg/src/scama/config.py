"""Run configuration: ``key = value`` text grouped under ``[model]``, ``[train]``, ``[data]``, ``[decode]``."""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import FrontEndConfig, GeneratorConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 1000
    batch_size: int = 16
    max_steps: int = 5000
    alpha: float = 0.2
    label_smoothing: float = 0.1
    seed: int = 0
    eval_every: int = 250
    patience: int = 8
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    dtype: str = "float32"
    spec_augment: bool = True
    freq_masks: int = 1
    freq_width: int = 2
    time_masks: int = 1
    time_width: int = 2

    def validate(self) -> None:
        if self.lr <= 0 or self.warmup_steps < 1 or self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("train: lr > 0, warmup_steps >= 1, batch_size >= 1 and max_steps >= 0 required")
        if self.alpha < 0:
            raise ConfigError("train.alpha must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("train.label_smoothing must be in [0, 1)")
        if self.eval_every < 1 or self.patience < 1:
            raise ConfigError("train.eval_every and train.patience must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")


@dataclass
class DataConfig:
    path: str = ""
    seed: int = 1234
    n_train: int = 2000
    n_dev: int = 100
    n_test: int = 200
    min_tokens: int = 4
    max_tokens: int = 12
    min_span: int = 4
    max_span: int = 10
    min_gap: int = 1
    max_gap: int = 4
    edge_silence: int = 4
    d_raw: int = 8
    noise: float = 0.3
    context_left: int = 3
    context_right: int = 3
    downsample: int = 3
    frame_ms: float = 10.0

    def validate(self) -> None:
        if min(self.n_train, self.n_dev, self.n_test) < 1 and not self.path:
            raise ConfigError("data: n_train, n_dev and n_test must be >= 1")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("data: need 1 <= min_tokens <= max_tokens")
        if not 1 <= self.min_span <= self.max_span or not 0 <= self.min_gap <= self.max_gap:
            raise ConfigError("data: span/gap ranges are invalid")
        if self.d_raw < 1 or self.downsample < 1 or self.context_left < 0 or self.context_right < 0:
            raise ConfigError("data: d_raw, downsample >= 1 and non-negative context required")

    def frontend(self) -> FrontEndConfig:
        return FrontEndConfig(self.context_left, self.context_right, self.downsample, self.d_raw)

    def generator(self, vocab_size: int) -> GeneratorConfig:
        return GeneratorConfig(
            vocab_size, self.min_tokens, self.max_tokens, self.min_span, self.max_span,
            self.min_gap, self.max_gap, self.edge_silence, self.d_raw, self.noise,
        )

    @property
    def model_frame_ms(self) -> float:
        return self.frame_ms * self.downsample


@dataclass
class DecodeConfig:
    beam: int = 4
    length_norm: bool = False

    def validate(self) -> None:
        if self.beam < 1:
            raise ConfigError("decode.beam must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def validate(self) -> None:
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.train.validate()
        self.data.validate()
        self.decode.validate()
        stacked = self.data.frontend().stacked_dim
        if self.model.d_in != stacked:
            raise ConfigError(f"model.d_in={self.model.d_in} but the front end produces {stacked}-dim features")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "decode": DecodeConfig}


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown sections or keys are rejected before anything runs."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        defaults = {f.name: f.default for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in defaults:
                    raise ConfigError(f"unknown key [{name}] {key}")
                values[key] = _convert(name, key, raw, defaults[key])
        try:
            parts[name] = cls(**values)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    cfg = RunConfig(**parts)
    cfg.validate()
    return cfg


def load_config(path, env: dict | None = None) -> RunConfig:
    """Read a config file; ``SCAMA_SEED`` in the environment overrides ``train.seed``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text)
    env = os.environ if env is None else env
    if env.get("SCAMA_SEED"):
        try:
            cfg.train.seed = int(env["SCAMA_SEED"])
        except ValueError:
            raise ConfigError(f"SCAMA_SEED must be an integer, got {env['SCAMA_SEED']!r}") from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
