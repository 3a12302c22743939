"""Bottom-up saliency decoder with optional global skip connections and per-stage supervision.

Stage 4 (stride 32) starts from the attended global feature. Each finer
stage k fuses the upsampled stage k+1 feature, the backbone map c_k, and
(with skip connections) the global feature upsampled to the stage-k grid.
Stage 1 is the final prediction. Every stage prediction is resized to the
ground-truth grid by nearest-neighbour lookup.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor
from .backbone import FeaturePyramid
from .config import ModelConfig
from .errors import DimensionError
from .nn import Conv2d, Module

STRIDES = (4, 8, 16, 32)


@dataclass
class SaliencyOutputs:
    stages: list  # [B, H, W] maps, finest stage first
    supervised: int  # leading stages that enter the loss

    @property
    def final(self) -> Tensor:
        return self.stages[0]

    @property
    def supervised_stages(self) -> list:
        return self.stages[: self.supervised]


class DecoderStage(Module):
    def __init__(self, rng, in_ch: int, width: int):
        self.fuse = Conv2d(rng, in_ch, width, 3, padding=1)
        self.head = Conv2d(rng, width, 1, 1, padding=0, init_scale=0.1)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        feat = ops.relu(self.fuse(x))
        return feat, self.head(feat)


def resize_to(pred: Tensor, stride: int, in_hw: tuple, gt_hw: tuple) -> Tensor:
    """Nearest resize of a stride-``stride`` map [B, 1, h, w] to ``gt_hw`` as [B, H, W].

    Each ground-truth pixel is mapped to the input pixel it covers and then
    to the feature cell containing that input pixel.
    """
    h, w = pred.shape[2:]
    rows = np.minimum(ops.nearest_indices(in_hw[0], gt_hw[0]) // stride, h - 1)
    cols = np.minimum(ops.nearest_indices(in_hw[1], gt_hw[1]) // stride, w - 1)
    out = ops.resize_nearest(pred, rows, cols)
    return out.reshape(out.shape[0], gt_hw[0], gt_hw[1])


def _to_grid(x: Tensor, scale: int, hw: tuple) -> Tensor:
    return ops.crop(ops.upsample_nearest(x, scale), *hw)


class SaliencyDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.use_decoder = cfg.decoder
        self.skip = cfg.skip_connection
        self.multi_supervision = cfg.multi_supervision
        width, D = cfg.decoder_width, cfg.embed_dim
        if not cfg.decoder:
            self.stages = [DecoderStage(rng, sum(cfg.widths), width)]
        else:
            stages = []
            for k in range(3):
                in_ch = width + cfg.widths[k] + (D if self.skip else 0)
                stages.append(DecoderStage(rng, in_ch, width))
            stages.append(DecoderStage(rng, D, width))
            self.stages = stages

    def __call__(self, pyr, fa, global_f, in_hw, gt_hw=None) -> SaliencyOutputs:
        return decode_saliency(pyr, fa, global_f, self, in_hw, gt_hw)


def decode_saliency(
    pyr: FeaturePyramid, fa: Tensor, global_f: Tensor, params: SaliencyDecoder, in_hw: tuple, gt_hw=None
) -> SaliencyOutputs:
    gt_hw = tuple(gt_hw or in_hw)
    grids = [tuple(c.shape[2:]) for c in pyr]

    if not params.use_decoder:
        parts = [pyr.c1] + [_to_grid(pyr[k], 2**k, grids[0]) for k in range(1, 4)]
        _, pred = params.stages[0](ops.concat(parts, axis=1))
        return SaliencyOutputs([resize_to(pred, STRIDES[0], in_hw, gt_hw)], 1)

    if tuple(fa.shape[2:]) != grids[3]:
        raise DimensionError(f"stage 4: attended feature grid {fa.shape[2:]} != c4 grid {grids[3]}")
    if tuple(global_f.shape[2:]) != grids[3]:
        raise DimensionError(f"stage 4: global feature grid {global_f.shape[2:]} != c4 grid {grids[3]}")

    preds = [None] * 4
    feat, preds[3] = params.stages[3](fa)
    for k in (2, 1, 0):
        parts = [_to_grid(feat, 2, grids[k]), pyr[k]]
        if params.skip:
            parts.append(_to_grid(global_f, 2 ** (3 - k), grids[k]))
        feat, preds[k] = params.stages[k](ops.concat(parts, axis=1))
    maps = [resize_to(p, s, in_hw, gt_hw) for p, s in zip(preds, STRIDES)]
    return SaliencyOutputs(maps, 4 if params.multi_supervision else 1)
