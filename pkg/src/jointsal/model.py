"""The joint saliency/segmentation network.

Shared encoder (backbone + Transformer) feeds a saliency decoder and, when
multi-task learning is on, a segmentation head. The segmentation head sits
behind a gradient-scaling node so that its loss reaches the encoder ten
times weaker. With the attention module on, saliency images also run the
segmentation head's feature layer to obtain the attention source.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import Tensor, grad_scale, no_grad
from .backbone import Backbone, FeaturePyramid, PatchEmbedding
from .config import ModelConfig
from .decoder import SaliencyDecoder, SaliencyOutputs
from .errors import ContractError
from .mam import MultiTaskAttention
from .nn import Conv2d, Module
from .segmentation import SegmentationDecoder, SegOutputs
from .transformer import TransformerEncoder


class JointSaliencyNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.backbone = Backbone(cfg, rng)
        if cfg.transformer:
            self.embed = PatchEmbedding(cfg, rng)
            self.transformer = TransformerEncoder(cfg, rng)
        else:
            self.embed = Conv2d(rng, cfg.widths[3], cfg.embed_dim, 1, padding=0)
            self.transformer = None
        self.seg = SegmentationDecoder(cfg, rng) if cfg.multi_task else None
        self.mam = MultiTaskAttention(rng, cfg.seg_width, cfg.embed_dim, cfg.mam_reduction) if cfg.mam else None
        self.decoder = SaliencyDecoder(cfg, rng)

    @property
    def in_hw(self) -> tuple:
        return (self.cfg.input_height, self.cfg.input_width)

    def encode(self, images: Tensor, rng: Optional[np.random.Generator] = None) -> tuple[FeaturePyramid, Tensor]:
        """Backbone pyramid and the global feature ``[B, D, H4, W4]``."""
        pyr = self.backbone(images)
        if self.transformer is not None:
            global_f = self.transformer(self.embed(pyr.c4, rng))
        else:
            global_f = self.embed(pyr.c4)
        return pyr, global_f

    def _seg_input(self, global_f: Tensor) -> Tensor:
        return grad_scale(global_f, self.cfg.seg_grad_scale)

    def forward_saliency(self, images: Tensor, gt_hw=None, rng=None) -> SaliencyOutputs:
        pyr, global_f = self.encode(images, rng)
        fa = global_f
        if self.mam is not None:
            s = self.seg.features(self._seg_input(global_f))
            fa = self.mam(s, global_f)
        return self.decoder(pyr, fa, global_f, self.in_hw, gt_hw)

    def forward_segmentation(self, images: Tensor, rng=None) -> SegOutputs:
        if self.seg is None:
            raise ContractError("this configuration has no segmentation branch")
        _, global_f = self.encode(images, rng)
        return self.seg(self._seg_input(global_f), tuple(images.shape[2:]))

    def predict(self, images: np.ndarray, emit_seg: bool = False):
        """Inference on a saliency image batch: final map [B, H, W] and optional argmax masks."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                x = Tensor(images)
                pyr, global_f = self.encode(x)
                fa = global_f
                seg_feat = None
                if self.seg is not None:
                    seg_feat = self.seg.features(global_f)
                if self.mam is not None:
                    fa = self.mam(seg_feat, global_f)
                sal = self.decoder(pyr, fa, global_f, self.in_hw).final.data
                masks = None
                if emit_seg and self.seg is not None:
                    masks = self.seg(global_f, tuple(images.shape[2:])).logits.data.argmax(axis=1)
        finally:
            self.train(was_training)
        return sal, masks
