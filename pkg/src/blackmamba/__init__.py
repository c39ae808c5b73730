"""Mamba state-space mixers combined with Sinkhorn-routed mixture-of-experts
channel blocks, built on a small numpy autodiff core."""

from .model import (ModelConfig, ModelParams, PRESETS, cross_entropy_loss, decode_step, generate,
                    init_generation_state, init_params, model_forward, preset)
from .moe import RoutingStats, SinkhornConfig, moe_forward
from .sinkhorn import RoutePlan, fast_init, sinkhorn
from .tensor import FlopCounter, Tape, Tensor

__version__ = "0.1.0"

__all__ = ["ModelConfig", "ModelParams", "PRESETS", "preset", "init_params", "model_forward", "cross_entropy_loss",
           "decode_step", "generate", "init_generation_state", "RoutingStats", "SinkhornConfig", "moe_forward",
           "RoutePlan", "fast_init", "sinkhorn", "FlopCounter", "Tape", "Tensor"]
