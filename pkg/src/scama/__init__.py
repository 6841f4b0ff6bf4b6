"""Streaming chunk-aware multihead attention speech recognition at toy scale."""

from .model import EOS, SOS, ModelConfig, SCAMAModel

__all__ = ["EOS", "SOS", "ModelConfig", "SCAMAModel"]
__version__ = "0.1.0"
