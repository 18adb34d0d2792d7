"""Adaptive attention-based structured filter pruning toolkit."""

from .config import (AttentionConfig, OracleSpec, PolicyConfig, RunConfig,
                     TrainConfig)
from .graph import LayerSpec, ModelGraph, build_preset

__all__ = [
    "AttentionConfig", "OracleSpec", "PolicyConfig", "RunConfig", "TrainConfig",
    "LayerSpec", "ModelGraph", "build_preset",
]

__version__ = "0.1.0"
