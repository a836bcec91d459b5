"""Minimal numpy tensor engine with reverse-mode differentiation."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, load_config, save_checkpoint
from .gradcheck import check_gradients, numeric_grad, relative_error
from .layers import (Conv3x3, EncoderLayer, LayerNorm, Linear, Module, ModuleParams,
                     MultiHeadSelfAttention, multi_head_self_attention, trunc_normal)
from .optim import Adam, MissingGradient, OneCycle, adam_step, one_cycle_lr
from .tensor import ShapeError, Tensor, float64_mode, no_grad

__all__ = [
    "Adam", "CheckpointError", "Conv3x3", "EncoderLayer", "LayerNorm", "Linear", "MissingGradient",
    "Module", "ModuleParams", "MultiHeadSelfAttention", "OneCycle", "ShapeError", "Tensor",
    "adam_step", "check_gradients", "float64_mode", "load_checkpoint", "load_config", "multi_head_self_attention",
    "no_grad", "numeric_grad", "one_cycle_lr", "ops", "relative_error", "save_checkpoint",
    "trunc_normal",
]
