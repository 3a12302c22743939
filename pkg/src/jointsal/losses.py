"""Per-stage MSE, pixelwise cross-entropy and the weighted joint objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .autodiff import Tensor, as_tensor
from .errors import ContractError, DataError, DimensionError

# Weight of each decoder stage's MSE, finest stage first; halves per stage.
STAGE_WEIGHTS = (1.0, 0.5, 0.25, 0.125)


@dataclass
class JointLossBreakdown:
    total: Tensor
    mse_per_stage: list
    ce: float
    loss_lambda: float

    @property
    def total_value(self) -> float:
        return float(self.total.data)

    @property
    def saliency_value(self) -> float:
        return sum(w * m for w, m in zip(STAGE_WEIGHTS, self.mse_per_stage))


def normalize_target(gt: np.ndarray) -> np.ndarray:
    """Max-normalize each ground-truth map ([H, W] or [B, H, W]) to [0, 1]."""
    gt = np.asarray(gt, dtype=np.float64)
    peak = gt.max(axis=(-2, -1), keepdims=True)
    return np.divide(gt, peak, out=np.zeros_like(gt), where=peak > 0)


def mse_loss(pred: Tensor, gt) -> Tensor:
    """Mean squared error over pixels of each image, then averaged over the batch.

    Accepts [H, W] or [B, H, W].
    """
    pred = as_tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise DimensionError(f"mse_loss shape mismatch: prediction {pred.shape} vs target {gt.shape}")
    diff = pred - gt
    sq = diff * diff
    if pred.ndim == 2:
        return sq.mean()
    per_image = sq.mean(axis=(-2, -1))
    return per_image.mean()


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over all pixels of ``-log softmax(logits)[true class]``; logits are [B, K, H, W]."""
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise DimensionError(f"cross_entropy expects logits [B, K, H, W], got {logits.shape}")
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    K = logits.shape[1]
    bad = np.argwhere((labels < 0) | (labels >= K))
    if len(bad):
        b, r, c = (int(v) for v in bad[0])
        raise DataError(f"label {int(labels[b, r, c])} outside [0, {K}) at image {b}, pixel ({r}, {c})")
    logp = ops.log_softmax(logits, axis=1)
    onehot = (labels[:, None, :, :] == np.arange(K)[None, :, None, None]).astype(logits.dtype)
    n = labels.size
    return (logp * Tensor(onehot)).sum() * (-1.0 / n)


def joint_loss(
    sal_stages: Sequence[Tensor],
    gt_map,
    seg_logits: Optional[Tensor] = None,
    gt_mask=None,
    loss_lambda: float = 0.1,
) -> JointLossBreakdown:
    """``sum_i STAGE_WEIGHTS[i] * MSE_i + lambda * CE``.

    ``sal_stages`` holds the supervised stage predictions, finest first (one
    or four of them). The ground-truth map is max-normalized before use.
    """
    if loss_lambda < 0:
        raise ContractError(f"lambda must be >= 0, got {loss_lambda}")
    if len(sal_stages) > len(STAGE_WEIGHTS):
        raise ContractError(f"at most {len(STAGE_WEIGHTS)} supervised stages, got {len(sal_stages)}")
    if sal_stages and gt_map is None:
        raise ContractError("saliency predictions supplied without a ground-truth map")
    if (seg_logits is None) != (gt_mask is None):
        raise ContractError("segmentation logits and mask must be supplied together")

    target = normalize_target(gt_map) if sal_stages else None
    mse_terms = [mse_loss(pred, target) for pred in sal_stages]
    ce = cross_entropy_loss(seg_logits, gt_mask) if seg_logits is not None else None
    total = weighted_total(mse_terms, ce, loss_lambda)
    return JointLossBreakdown(
        total,
        [float(m.data) for m in mse_terms],
        float(ce.data) if ce is not None else 0.0,
        float(loss_lambda),
    )


def weighted_total(mse_terms: Sequence[Tensor], ce: Optional[Tensor], loss_lambda: float) -> Tensor:
    """Combine already computed loss terms with the stage weights and lambda."""
    total = None
    for w, m in zip(STAGE_WEIGHTS, mse_terms):
        term = m * w
        total = term if total is None else total + term
    if ce is not None:
        term = ce * loss_lambda
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
