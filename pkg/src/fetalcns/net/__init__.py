"""Residual convolutional network: forward, exact reverse-mode gradients,
activation capture, and bit-exact checkpointing."""

from .config import NetConfig, desk_config, resnet34_config
from .model import (
    ForwardCapture,
    ParameterSet,
    build_model,
    calibrate_running_stats,
    forward,
    forward_with_capture,
    gradients,
    last_stage_logit_gradient,
    loss_value,
    parameter_spec,
    softmax,
)
from .checkpoint import MAGIC, load_checkpoint, save_checkpoint

__all__ = [
    "NetConfig",
    "desk_config",
    "resnet34_config",
    "ParameterSet",
    "ForwardCapture",
    "parameter_spec",
    "build_model",
    "calibrate_running_stats",
    "forward",
    "forward_with_capture",
    "gradients",
    "last_stage_logit_gradient",
    "loss_value",
    "softmax",
    "MAGIC",
    "save_checkpoint",
    "load_checkpoint",
]
