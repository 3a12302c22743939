"""Segmentation head: class scores at the coarse grid, then stride-2 deconvolutions to full size."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigError
from .nn import Conv2d, ConvTranspose2d, Module


@dataclass
class SegOutputs:
    logits: Tensor  # [B, K, H, W]
    pre_logit_feature: Tensor  # [B, Cs, H4, W4]


class SegmentationDecoder(Module):
    """Feature conv -> 1x1 class conv -> ``log2(32)`` stride-2 deconvolutions -> crop.

    The deconvolutions keep ``K`` channels so every layer stays a per-class
    map. ``pre_logit_feature`` is what the attention module reads.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, stride: int = 32):
        n_up = int(round(math.log2(stride)))
        if 2**n_up != stride:
            raise ConfigError(f"segmentation stride {stride} is not a power of two")
        K = cfg.num_classes
        self.feature = Conv2d(rng, cfg.embed_dim, cfg.seg_width, 1, padding=0)
        self.classify = Conv2d(rng, cfg.seg_width, K, 1, padding=0)
        self.upsample = [ConvTranspose2d(rng, K, K, 2, 2) for _ in range(n_up)]
        self.out_hw = (cfg.input_height, cfg.input_width)

    def features(self, enc_out: Tensor) -> Tensor:
        return ops.relu(self.feature(enc_out))

    def __call__(self, enc_out: Tensor, out_hw: tuple | None = None) -> SegOutputs:
        return decode_segmentation(enc_out, self, out_hw)


def decode_segmentation(enc_out: Tensor, params: SegmentationDecoder, out_hw: tuple | None = None) -> SegOutputs:
    H, W = out_hw or params.out_hw
    feat = params.features(enc_out)
    x = params.classify(feat)
    for deconv in params.upsample:
        x = deconv(x)
    if x.shape[2] < H or x.shape[3] < W:
        raise ConfigError(
            f"deconvolution chain reaches {x.shape[2]}x{x.shape[3]}, short of the {H}x{W} input"
        )
    return SegOutputs(ops.crop(x, H, W), feat)
