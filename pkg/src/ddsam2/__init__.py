"""Depthwise-dilated adapters for a miniature SAM2-style video tracker."""

from .adapter import DDAdapterConfig, dd_adapter_forward, flop_count, param_count, std_adapter_forward
from .model import EncoderConfig, MemoryBank, ModelState, init_state, set_trainable, track_video
from .tensor import Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "DDAdapterConfig", "EncoderConfig", "MemoryBank", "ModelState", "Tape", "Tensor",
    "dd_adapter_forward", "flop_count", "grad_check", "init_state", "param_count",
    "set_trainable", "std_adapter_forward", "track_video",
]
