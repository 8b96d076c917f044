"""Minimal numpy autograd, layers, and optimizer used by the models."""

from .autograd import (Tensor, concat, conv2d, group_norm, matmul, sigmoid,
                       silu, softmax, upsample_nearest2x)
from .layers import (Conv2d, CrossAttention, Downsample, GroupNorm, Linear,
                     Module, ResBlock, Upsample, timestep_embedding)
from .optim import Adam

__all__ = [
    "Tensor", "concat", "conv2d", "group_norm", "matmul", "sigmoid", "silu",
    "softmax", "upsample_nearest2x",
    "Conv2d", "CrossAttention", "Downsample", "GroupNorm", "Linear", "Module",
    "ResBlock", "Upsample", "timestep_embedding", "Adam",
]
