"""Numerical substrate: tensors, autodiff, layers, AdamW, checkpoints."""
from .autograd import (
    NEG_INF,
    DimensionError,
    NumericError,
    Tensor,
    backward,
    masked_attention,
    masked_softmax,
    no_grad,
)
from .layers import MLP, Conv2d, LayerNorm, Linear, fourier_embed, mlp_forward, timestep_embed
from .optim import AdamWState, adamw_step
from .params import CheckpointError, ParamStore, decode_checkpoint, encode_checkpoint

__all__ = [
    "NEG_INF", "DimensionError", "NumericError", "Tensor", "backward", "masked_attention",
    "masked_softmax", "no_grad", "MLP", "Conv2d", "LayerNorm", "Linear", "fourier_embed",
    "mlp_forward", "timestep_embed", "AdamWState", "adamw_step", "CheckpointError",
    "ParamStore", "decode_checkpoint", "encode_checkpoint",
]
