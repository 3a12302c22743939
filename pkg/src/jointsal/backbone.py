"""Residual convolutional encoder and the bridge into the Transformer.

The encoder follows the pre-activation residual layout (activation before
each convolution, identity shortcut) scaled down to desk size: a stride-4
stem, then four stages whose first block of stages 2-4 halves resolution.
Branch convolutions carry no bias, so a block whose convolution weights are
all zero is exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module, parameter


@dataclass
class FeaturePyramid:
    c1: Tensor  # stride 4
    c2: Tensor  # stride 8
    c3: Tensor  # stride 16
    c4: Tensor  # stride 32

    def __iter__(self):
        return iter((self.c1, self.c2, self.c3, self.c4))

    def __getitem__(self, i):
        return (self.c1, self.c2, self.c3, self.c4)[i]


@dataclass
class PatchSequence:
    tokens: Tensor  # [B, L, D]
    origin_hw: tuple


class PreActBlock(Module):
    """``x + conv2(relu(conv1(relu(x))))``, with an optional stride-2 projection shortcut."""

    def __init__(self, rng, in_ch, out_ch, stride=1, init_scale=1.0):
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, stride=1, padding=1, bias=False, init_scale=init_scale)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(rng, in_ch, out_ch, 1, stride=stride, padding=0, bias=False)
        else:
            self.shortcut = None

    def __call__(self, x: Tensor) -> Tensor:
        pre = ops.relu(x)
        branch = self.conv2(ops.relu(self.conv1(pre)))
        skip = x if self.shortcut is None else self.shortcut(pre)
        return skip + branch


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        w1, w2, w3, w4 = cfg.widths
        half = max(w1 // 2, 1)
        self.stem1 = Conv2d(rng, cfg.in_channels, half, 3, stride=2, padding=1)
        self.stem2 = Conv2d(rng, half, w1, 3, stride=2, padding=1)
        scale = cfg.branch_init_scale
        self.stages = []
        prev = w1
        for k, width in enumerate(cfg.widths):
            blocks = []
            if k > 0:
                blocks.append(PreActBlock(rng, prev, width, stride=2, init_scale=scale))
            blocks += [PreActBlock(rng, width, width, init_scale=scale) for _ in range(cfg.blocks_per_stage)]
            self.stages.append(blocks)
            prev = width
        self.in_hw = (cfg.input_height, cfg.input_width)

    def __call__(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4:
            raise DimensionError(f"backbone expects [B, C, H, W], got {image.shape}")
        H, W = image.shape[2:]
        if H % 16 or W % 16:
            raise ConfigError(f"input size {H}x{W} must be a multiple of 16 on both axes")
        x = self.stem2(ops.relu(self.stem1(image)))
        feats = []
        for blocks in self.stages:
            for block in blocks:
                x = block(x)
            feats.append(x)
        return FeaturePyramid(*feats)


def flatten_tokens(x: Tensor) -> Tensor:
    """[B, D, H, W] -> [B, H*W, D], row-major over (H, W)."""
    B, D, H, W = x.shape
    return x.reshape(B, D, H * W).transpose(0, 2, 1)


def unflatten_tokens(tokens: Tensor, hw: tuple) -> Tensor:
    """Inverse of :func:`flatten_tokens`."""
    B, L, D = tokens.shape
    H, W = hw
    if L != H * W:
        raise DimensionError(f"cannot unflatten {L} tokens into a {H}x{W} grid")
    return tokens.transpose(0, 2, 1).reshape(B, D, H, W)


class PatchEmbedding(Module):
    """1x1 convolution to the embedding width plus a learnable positional table.

    Every pixel of the deepest feature map becomes one token.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        H4, W4 = cfg.stage_hw[3]
        self.proj = Conv2d(rng, cfg.widths[3], cfg.embed_dim, 1, padding=0)
        self.pos = parameter(np.zeros((H4 * W4, cfg.embed_dim)))
        self.dropout = cfg.dropout

    def __call__(self, c4: Tensor, rng=None) -> PatchSequence:
        return embed_patches(c4, self.proj, self.pos, self.dropout, self.training, rng)


def embed_patches(c4: Tensor, embed: Conv2d, pos: Tensor, rate: float, training: bool, rng=None) -> PatchSequence:
    if embed.weight.shape[2:] != (1, 1) or embed.stride != 1:
        raise ConfigError("patch embedding must be a 1x1, stride-1 convolution")
    H4, W4 = c4.shape[2:]
    if pos.shape[0] != H4 * W4:
        raise ConfigError(f"positional table has {pos.shape[0]} rows but the grid has {H4 * W4} patches")
    tokens = flatten_tokens(embed(c4)) + pos
    if training and rate > 0:
        # drop whole embedding channels, i.e. feature maps of the [B, D, H, W] view
        tokens = ops.dropout2d(tokens.transpose(0, 2, 1), rate, training, rng).transpose(0, 2, 1)
    return PatchSequence(tokens, (H4, W4))
