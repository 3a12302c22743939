"""Saliency evaluation metrics.

Fixation-based: AUC-Judd, shuffled AUC, NSS, information gain.
Distribution-based: CC, SIM, KL.

Maps are 2-D non-negative arrays; fixations are ``(row, col)`` integer
pairs, duplicates allowed. Distribution metrics work on sum-normalized
copies and never modify their inputs.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import DataError, MetricError

# All tunable metric constants live here.
KL_EPS = 1e-12
IG_EPS = 1e-12
CENTER_SIGMA_FRACTION = 0.25

# Column order of the report tables.
REPORT_COLUMNS = ("s_auc", "auc_judd", "ig", "nss", "cc", "sim", "kl")
REPORT_HEADERS = {
    "s_auc": "s-AUC",
    "auc_judd": "AUC-Judd",
    "ig": "IG",
    "nss": "NSS",
    "cc": "CC",
    "sim": "SIM",
    "kl": "KL",
}


class DegenerateInputWarning(RuntimeWarning):
    """A metric received a constant map and fell back to its documented default."""


def _as_map(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise MetricError(f"saliency maps must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise MetricError("saliency map contains non-finite values")
    return m


def _as_fixations(fix, shape) -> np.ndarray:
    pts = np.asarray(fix, dtype=np.int64).reshape(-1, 2)
    if len(pts) == 0:
        raise MetricError("fixation set is empty")
    H, W = shape
    if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] >= H) or np.any(pts[:, 1] < 0) or np.any(pts[:, 1] >= W):
        raise MetricError(f"fixation outside the {H}x{W} map")
    return pts


def _normalized(m: np.ndarray, what: str) -> np.ndarray:
    if np.any(m < 0):
        raise MetricError(f"{what} has negative entries; distribution metrics need a non-negative map")
    total = m.sum()
    if total <= 0:
        raise MetricError(f"{what} sums to zero and cannot be normalized")
    return m / total


def _trapezoid(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) * 0.5))


def auc_judd(pred, fix) -> float:
    """ROC area with thresholds at the fixated saliency values.

    TPR is the fraction of fixations at or above a threshold, FPR the
    fraction of all pixels at or above it; the curve is closed with (0, 0)
    and (1, 1) and integrated with the trapezoid rule.
    """
    s = _as_map(pred)
    pts = _as_fixations(fix, s.shape)
    fixated = s[pts[:, 0], pts[:, 1]]
    thresholds = np.sort(fixated)[::-1]
    all_sorted = np.sort(s.ravel())
    fix_sorted = np.sort(fixated)
    above_all = all_sorted.size - np.searchsorted(all_sorted, thresholds, side="left")
    above_fix = fix_sorted.size - np.searchsorted(fix_sorted, thresholds, side="left")
    tp = np.concatenate(([0.0], above_fix / fixated.size, [1.0]))
    fp = np.concatenate(([0.0], above_all / s.size, [1.0]))
    return _trapezoid(fp, tp)


def shuffled_auc(pred, fix, negatives) -> float:
    """ROC area of fixated values against values at other images' fixations.

    All distinct values of either set serve as thresholds, so the result
    equals the Mann-Whitney probability that a fixation outscores a
    negative, with ties counted one half.
    """
    s = _as_map(pred)
    pts = _as_fixations(fix, s.shape)
    neg = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    if len(neg) == 0:
        raise MetricError("shuffled AUC needs a non-empty negative pool")
    neg = _as_fixations(neg, s.shape)
    pos_v = np.sort(s[pts[:, 0], pts[:, 1]])
    neg_v = np.sort(s[neg[:, 0], neg[:, 1]])
    thresholds = np.unique(np.concatenate((pos_v, neg_v)))[::-1]
    tp = pos_v.size - np.searchsorted(pos_v, thresholds, side="left")
    fp = neg_v.size - np.searchsorted(neg_v, thresholds, side="left")
    tpr = np.concatenate(([0.0], tp / pos_v.size, [1.0]))
    fpr = np.concatenate(([0.0], fp / neg_v.size, [1.0]))
    return _trapezoid(fpr, tpr)


def nss(pred, fix) -> float:
    """Mean of the z-scored map (population std) at the fixations; 0 for a constant map."""
    s = _as_map(pred)
    pts = _as_fixations(fix, s.shape)
    std = s.std()
    if std == 0 or np.ptp(s) == 0:
        warnings.warn("NSS of a constant map is defined as 0", DegenerateInputWarning, stacklevel=2)
        return 0.0
    z = (s - s.mean()) / std
    return float(z[pts[:, 0], pts[:, 1]].mean())


def cc(pred, gt) -> float:
    """Pearson correlation of the flattened maps; 0 if either map is constant."""
    a, b = _as_map(pred), _as_map(gt)
    if a.shape != b.shape:
        raise MetricError(f"map shapes differ: {a.shape} vs {b.shape}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        warnings.warn("CC with a constant map is defined as 0", DegenerateInputWarning, stacklevel=2)
        return 0.0
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if denom == 0:
        warnings.warn("CC with a constant map is defined as 0", DegenerateInputWarning, stacklevel=2)
        return 0.0
    return float((a * b).sum() / denom)


def sim(pred, gt) -> float:
    """Histogram intersection of the sum-normalized maps."""
    a, b = _as_map(pred), _as_map(gt)
    if a.shape != b.shape:
        raise MetricError(f"map shapes differ: {a.shape} vs {b.shape}")
    return float(np.minimum(_normalized(a, "prediction"), _normalized(b, "ground truth")).sum())


def kl(pred, gt) -> float:
    """``sum g * log(g / (p + eps))`` over the normalized maps; zero-mass gt pixels contribute 0."""
    p, g = _as_map(pred), _as_map(gt)
    if p.shape != g.shape:
        raise MetricError(f"map shapes differ: {p.shape} vs {g.shape}")
    g = _normalized(g, "ground truth")
    p = _normalized(p, "prediction")
    mask = g > 0
    return float(np.sum(g[mask] * np.log(g[mask] / (p[mask] + KL_EPS))))


def center_prior(shape, sigma_fraction: float = CENTER_SIGMA_FRACTION) -> np.ndarray:
    """Isotropic Gaussian peaked at the grid centre, normalized to sum 1."""
    H, W = shape
    sigma = sigma_fraction * min(H, W)
    r = np.arange(H) - (H - 1) / 2.0
    c = np.arange(W) - (W - 1) / 2.0
    g = np.exp(-(r[:, None] ** 2 + c[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def ig(pred, fix, baseline=None) -> float:
    """Mean gain in bits of the prediction over a baseline at the fixations."""
    p = _as_map(pred)
    pts = _as_fixations(fix, p.shape)
    b = center_prior(p.shape) if baseline is None else _as_map(baseline)
    if b.shape != p.shape:
        raise MetricError(f"baseline shape {b.shape} differs from prediction {p.shape}")
    p = _normalized(p, "prediction")
    b = _normalized(b, "baseline")
    r, c = pts[:, 0], pts[:, 1]
    return float(np.mean(np.log2(p[r, c] + IG_EPS) - np.log2(b[r, c] + IG_EPS)))


@dataclass
class MetricReport:
    auc_judd: float
    s_auc: Optional[float]
    nss: float
    cc: float
    sim: float
    kl: float
    ig: float
    per_image: list = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}


def image_metrics(pred, gt, fix, negatives=None, baseline=None) -> dict:
    """All seven metrics for one image; ``s_auc`` is None without negatives."""
    return {
        "s_auc": shuffled_auc(pred, fix, negatives) if negatives is not None else None,
        "auc_judd": auc_judd(pred, fix),
        "ig": ig(pred, fix, baseline),
        "nss": nss(pred, fix),
        "cc": cc(pred, gt),
        "sim": sim(pred, gt),
        "kl": kl(pred, gt),
    }


def shuffle_negatives(image_id, pool: Mapping, shape) -> np.ndarray:
    """Fixations of every other image in the pool (sorted id order) that fall inside ``shape``."""
    H, W = shape
    parts = [np.asarray(pool[k], dtype=np.int64).reshape(-1, 2) for k in sorted(pool) if k != image_id]
    if not parts:
        return np.zeros((0, 2), dtype=np.int64)
    pts = np.concatenate(parts)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < H) & (pts[:, 1] >= 0) & (pts[:, 1] < W)
    return pts[inside]


def evaluate(
    preds: Mapping,
    gts: Mapping,
    fixs: Mapping,
    shuffle_pool: Optional[Mapping] = None,
    workers: int = 1,
) -> MetricReport:
    """Per-image metrics averaged arithmetically in sorted id order."""
    ids = sorted(preds)
    missing = sorted(set(preds) ^ set(gts) | set(preds) ^ set(fixs))
    if missing:
        raise DataError(f"image ids not present in all of predictions/maps/fixations: {missing}")

    def one(image_id):
        pred = _as_map(preds[image_id])
        negatives = None
        if shuffle_pool is not None:
            negatives = shuffle_negatives(image_id, shuffle_pool, pred.shape)
        row = image_metrics(pred, gts[image_id], fixs[image_id], negatives)
        return {"id": image_id, **row}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, ids))
    else:
        rows = [one(i) for i in ids]
    if not rows:
        raise DataError("nothing to evaluate")

    means = {}
    for key in REPORT_COLUMNS:
        values = [r[key] for r in rows]
        means[key] = None if any(v is None for v in values) else sum(values) / len(values)
    return MetricReport(per_image=rows, **means)


def format_table(rows: list, columns=REPORT_COLUMNS, label: str = "id") -> str:
    """Aligned text table; absent values print as ``-``."""
    headers = [label] + [REPORT_HEADERS[c] for c in columns]
    body = []
    for r in rows:
        cells = [str(r.get(label, ""))]
        cells += ["-" if r.get(c) is None else f"{r[c]:.4f}" for c in columns]
        body.append(cells)
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
