"""Multi-task attention: channel weights for the saliency feature computed from the segmentation feature."""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import ConfigError
from .nn import Conv2d, Linear, Module


class MultiTaskAttention(Module):
    """1x1 transfer conv, then a shared two-layer MLP over max- and avg-pooled vectors."""

    def __init__(self, rng: np.random.Generator, seg_channels: int, channels: int, reduction: int = 4):
        if channels % reduction:
            raise ConfigError(f"{channels} channels not divisible by reduction {reduction}")
        self.transfer = Conv2d(rng, seg_channels, channels, 1, padding=0)
        self.fc1 = Linear(rng, channels, channels // reduction)
        self.fc2 = Linear(rng, channels // reduction, channels)
        self.last_attention = None

    def mlp(self, v: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(v)))

    def attention(self, s: Tensor) -> Tensor:
        """Channel weights in (0, 1), shape [B, C]."""
        t = self.transfer(s)
        B, C = t.shape[:2]
        max_vec = ops.global_max_pool(t).reshape(B, C)
        avg_vec = ops.global_avg_pool(t).reshape(B, C)
        return ops.sigmoid(self.mlp(max_vec) + self.mlp(avg_vec))

    def __call__(self, s: Tensor, f_star: Tensor) -> Tensor:
        return mam_forward(s, f_star, self)


def mam_forward(s: Tensor, f_star: Tensor, params: MultiTaskAttention) -> Tensor:
    C = f_star.shape[1]
    if params.transfer.weight.shape[0] != C:
        raise ConfigError(
            f"MAM transfer emits {params.transfer.weight.shape[0]} channels but the feature has {C}"
        )
    if s.shape[0] != f_star.shape[0]:
        raise ConfigError(f"MAM batch mismatch: {s.shape} vs {f_star.shape}")
    att = params.attention(s)
    params.last_attention = att.data
    return f_star * att.reshape(att.shape[0], C, 1, 1)
