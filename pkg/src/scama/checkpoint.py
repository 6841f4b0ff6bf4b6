"""Model checkpoints: parameters plus the run configuration in one container file."""

from __future__ import annotations

import numpy as np

from . import container
from .config import ConfigError, RunConfig, dump_config, parse_config
from .model import SCAMAModel

CONFIG_KEY = "meta.config"
STEP_KEY = "meta.step"
PARAM_PREFIX = "param."


class CheckpointMismatch(ValueError):
    """The checkpoint does not fit the requested configuration."""


def save_checkpoint(path, model: SCAMAModel, cfg: RunConfig, step: int = 0) -> None:
    arrays = {CONFIG_KEY: container.encode_text(dump_config(cfg)), STEP_KEY: np.array([step], dtype=np.float32)}
    for name, value in model.state_dict().items():
        arrays[PARAM_PREFIX + name] = value
    container.save(path, arrays)


def load_checkpoint(path, dtype=np.float64) -> tuple[SCAMAModel, RunConfig]:
    """Rebuild the model described by the stored configuration and load its weights."""
    arrays = container.load(path)
    if CONFIG_KEY not in arrays:
        raise container.ContainerError(f"{path}: no stored configuration")
    try:
        cfg = parse_config(container.decode_text(arrays[CONFIG_KEY]))
    except ConfigError as exc:
        raise container.ContainerError(f"{path}: stored configuration is invalid: {exc}") from exc
    model = SCAMAModel(cfg.model, seed=0, dtype=dtype)
    state = {k[len(PARAM_PREFIX) :]: v for k, v in arrays.items() if k.startswith(PARAM_PREFIX)}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from exc
    return model, cfg


def check_compatible(stored: RunConfig, requested: RunConfig) -> None:
    """Architecture fields of a requested config must match the checkpoint's."""
    fixed = ("d_in", "vocab_size", "d_model", "heads", "d_ff", "n_encoder", "n_decoder_att", "n_decoder_fsmn",
             "chunk_size", "mem_look_back", "mem_look_ahead", "dec_mem_order", "predictor_hidden",
             "encoder_mode", "attention", "memory_source", "decoder_order")
    diffs = [
        f"{name}: checkpoint={getattr(stored.model, name)!r} config={getattr(requested.model, name)!r}"
        for name in fixed
        if getattr(stored.model, name) != getattr(requested.model, name)
    ]
    if requested.model.c_max and requested.model.c_max != stored.model.c_max:
        diffs.append(f"c_max: checkpoint={stored.model.c_max} config={requested.model.c_max}")
    if diffs:
        raise CheckpointMismatch("configuration does not match checkpoint: " + "; ".join(diffs))
