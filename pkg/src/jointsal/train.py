"""Joint two-branch training loop, per-epoch evaluation and the ablation grid.

Every source of randomness in a run is derived from the train seed and a
counter (epoch for the saliency shuffle, pass number for the segmentation
stream, step for dropout), so a run resumed from a checkpoint replays the
exact same sequence without storing generator state.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .autodiff import Tensor
from .config import ABLATION_CHAIN, ModelConfig, TrainConfig, dump_config
from .data import Sample
from .errors import ContractError, DataError, DivergenceError
from .losses import JointLossBreakdown, joint_loss
from .metrics import REPORT_COLUMNS, evaluate
from .model import JointSaliencyNet
from .optim import Optimizer, build_optimizer, lr_at

HISTORY_COLUMNS = ("step", "epoch", "lr", "mse1", "mse2", "mse3", "mse4", "ce", "total") + REPORT_COLUMNS

_SHUFFLE, _SEG_STREAM, _DROPOUT = 1, 2, 3


@contextlib.contextmanager
def reference_mode():
    """Pin BLAS/OpenMP pools to one thread so floating-point reductions are reproducible."""
    with threadpool_limits(limits=1):
        yield


def _stack(samples: Sequence[Sample], attr: str) -> np.ndarray:
    return np.stack([getattr(s, attr) for s in samples])


def joint_train_step(
    model: JointSaliencyNet,
    sal_batch: tuple,
    seg_batch: Optional[tuple],
    opt: Optimizer,
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    step: int = 0,
) -> JointLossBreakdown:
    """One forward of each branch on its own images, one backward on the joint loss, one update.

    ``sal_batch`` is (images [B, 3, H, W], maps [B, H, W]); ``seg_batch`` is
    (images, masks) or None. Without a segmentation branch lambda is unused.
    Dropout draws from ``rng``, by default the run's generator for ``step``.
    """
    lam = cfg.loss_lambda if model.seg is not None else 0.0
    if lam > 0 and seg_batch is None:
        raise ContractError(f"lambda = {lam} > 0 needs a segmentation batch")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, _DROPOUT, step])
    model.train()
    opt.zero_grad()
    images, maps = sal_batch
    out = model.forward_saliency(Tensor(images), gt_hw=maps.shape[-2:], rng=rng)
    seg_logits = masks = None
    if lam > 0:
        seg_images, masks = seg_batch
        seg_logits = model.forward_segmentation(Tensor(seg_images), rng=rng).logits
    br = joint_loss(out.supervised_stages, maps, seg_logits, masks, lam)
    if not math.isfinite(br.total_value):
        raise DivergenceError(step, br.total_value)
    br.total.backward()
    opt.step()
    return br


def prediction_to_map(pred: np.ndarray) -> np.ndarray:
    """Raw decoder output to a non-negative map; an all-zero result becomes uniform."""
    m = np.clip(np.asarray(pred, dtype=np.float64), 0.0, None)
    if not m.any():
        return np.ones_like(m)
    return m


def predict_maps(model: JointSaliencyNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = [model.predict(images[i : i + batch_size])[0] for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def evaluate_model(model: JointSaliencyNet, samples: Sequence[Sample]) -> dict:
    """Seven-metric means over ``samples``; the s-AUC pool is the split's own fixations."""
    preds = predict_maps(model, _stack(samples, "image"))
    pm = {s.id: prediction_to_map(p) for s, p in zip(samples, preds)}
    gts = {s.id: s.sal for s in samples}
    fixs = {s.id: s.fixations for s in samples}
    pool = fixs if len(samples) > 1 else None
    return evaluate(pm, gts, fixs, shuffle_pool=pool).row()


def split_dataset(samples: Sequence[Sample], val_fraction: float) -> tuple[list, list]:
    """Leading samples train, trailing ``round(n * val_fraction)`` validate (id order)."""
    ordered = sorted(samples, key=lambda s: s.id)
    n_val = int(round(len(ordered) * val_fraction))
    if n_val >= len(ordered):
        raise DataError(f"validation split of {n_val} leaves no training samples")
    return ordered[: len(ordered) - n_val], ordered[len(ordered) - n_val :]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def history_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in HISTORY_COLUMNS])
    return buf.getvalue()


def read_history(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                if v == "":
                    row[k] = None
                elif k in ("step", "epoch"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows


@dataclass
class ExperimentResult:
    model: JointSaliencyNet
    history: list
    metrics: Optional[dict]
    step: int
    checkpoint_path: Optional[Path] = None
    epoch_metrics: list = field(default_factory=list)


class _SegStream:
    """Endless shuffled stream of segmentation samples, addressable by position."""

    def __init__(self, samples: Sequence[Sample], seed: int):
        self.samples = list(samples)
        self.seed = seed
        self._cache: dict = {}

    def take(self, start: int, count: int) -> list[Sample]:
        n = len(self.samples)
        out = []
        for pos in range(start, start + count):
            p, i = divmod(pos, n)
            if p not in self._cache:
                self._cache = {p: np.random.default_rng([self.seed, _SEG_STREAM, p]).permutation(n)}
            out.append(self.samples[self._cache[p][i]])
        return out


def _seg_batch(stream: Optional[_SegStream], step: int, cfg: TrainConfig):
    if stream is None or cfg.seg_batches_per_step == 0:
        return None
    per_step = cfg.seg_batch_size * cfg.seg_batches_per_step
    batch = stream.take(step * per_step, per_step)
    return _stack(batch, "image"), _stack(batch, "mask")


def run_experiment(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sal_data: Sequence[Sample],
    seg_data: Optional[Sequence[Sample]] = None,
    out_dir=None,
    resume=None,
    val_data: Optional[Sequence[Sample]] = None,
    max_steps: Optional[int] = None,
    evaluate_each_epoch: bool = True,
    log=None,
) -> ExperimentResult:
    """Train for ``train_cfg.epochs`` epochs, evaluating on the held-out split after each.

    Without ``val_data`` the saliency set is split by ``val_fraction``.
    With ``out_dir``, writes ``history.csv``, ``config.toml`` and
    ``checkpoint.sstm`` (refreshed every epoch). ``resume`` names a
    checkpoint whose step counter and history the run continues from.
    """
    uses_seg = model_cfg.multi_task and train_cfg.loss_lambda > 0
    if uses_seg and not seg_data:
        raise ContractError(f"lambda = {train_cfg.loss_lambda} > 0 requires segmentation data")
    if any(s.sal is None for s in sal_data):
        raise DataError("saliency training data lacks ground-truth maps")
    if uses_seg and any(s.mask is None for s in seg_data):
        raise DataError("segmentation training data lacks masks")

    if val_data is None:
        train_set, val_set = split_dataset(sal_data, train_cfg.val_fraction)
    else:
        train_set, val_set = sorted(sal_data, key=lambda s: s.id), list(val_data)
    model = JointSaliencyNet(model_cfg)
    opt = build_optimizer(model.parameters(), train_cfg)
    stream = _SegStream(sorted(seg_data, key=lambda s: s.id), train_cfg.seed) if uses_seg else None

    out = Path(out_dir) if out_dir is not None else None
    history: list = []
    step = 0
    if resume is not None:
        meta, records = checkpoint.read(resume)
        checkpoint.load_into(model, records, opt, meta)
        step = int(meta["step"])
        hist_path = Path(resume).with_name("history.csv")
        if hist_path.exists():
            history = [r for r in read_history(hist_path) if r["step"] < step]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.toml").write_text(dump_config(model_cfg, train_cfg))

    n = len(train_set)
    bs = min(train_cfg.sal_batch_size, n)
    steps_per_epoch = -(-n // bs)
    total_steps = steps_per_epoch * train_cfg.epochs
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    images = _stack(train_set, "image")
    maps = _stack(train_set, "sal")
    epoch_metrics = []
    metrics = None
    ckpt_path = out / "checkpoint.sstm" if out is not None else None

    while step < total_steps:
        epoch, k = divmod(step, steps_per_epoch)
        order = np.random.default_rng([train_cfg.seed, _SHUFFLE, epoch]).permutation(n)
        idx = order[k * bs : (k + 1) * bs]
        opt.lr = lr_at(step, train_cfg.lr, train_cfg.lr_milestones, train_cfg.lr_decay)
        br = joint_train_step(
            model, (images[idx], maps[idx]), _seg_batch(stream, step, train_cfg), opt, train_cfg, step=step
        )
        mse = list(br.mse_per_stage) + [None] * (4 - len(br.mse_per_stage))
        row = {"step": step, "epoch": epoch, "lr": opt.lr, "ce": br.ce if uses_seg else None, "total": br.total_value}
        row.update({f"mse{i + 1}": v for i, v in enumerate(mse)})
        step += 1
        end_of_epoch = step % steps_per_epoch == 0
        if end_of_epoch and evaluate_each_epoch and val_set:
            metrics = evaluate_model(model, val_set)
            row.update(metrics)
            epoch_metrics.append({"epoch": epoch, **metrics})
        history.append(row)
        if log is not None:
            log(row)
        if (end_of_epoch or step == total_steps) and out is not None:
            _write_outputs(out, model, opt, model_cfg, train_cfg, step, history)

    if metrics is None and evaluate_each_epoch and val_set:
        metrics = evaluate_model(model, val_set)
    if out is not None:
        _write_outputs(out, model, opt, model_cfg, train_cfg, step, history)
    return ExperimentResult(model, history, metrics, step, ckpt_path, epoch_metrics)


def _write_outputs(out: Path, model, opt, model_cfg, train_cfg, step, history) -> None:
    meta = {
        "step": step,
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
    }
    checkpoint.save(out / "checkpoint.sstm", model, meta, opt)
    (out / "history.csv").write_text(history_csv(history))


def model_config_from_meta(meta: dict) -> ModelConfig:
    return ModelConfig(**meta["model"])


def load_model(path) -> tuple[JointSaliencyNet, dict]:
    meta, records = checkpoint.read(path)
    model = JointSaliencyNet(model_config_from_meta(meta))
    checkpoint.load_into(model, records)
    model.eval()
    return model, meta


def run_grid(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sal_data: Sequence[Sample],
    seg_data: Optional[Sequence[Sample]] = None,
    out_dir=None,
    **kwargs,
) -> list[dict]:
    """Train every row of the ablation chain under one seed; one result row per level."""
    base = dataclasses.asdict(model_cfg)
    flags = set(ABLATION_CHAIN[1:])
    rows = []
    for level in ABLATION_CHAIN:
        overrides = {k: v for k, v in base.items() if k not in flags}
        cfg = ModelConfig.for_ablation(level, **overrides)
        sub = Path(out_dir) / level if out_dir is not None else None
        res = run_experiment(cfg, train_cfg, sal_data, seg_data if cfg.multi_task else None, sub, **kwargs)
        rows.append({"model": level, **(res.metrics or {})})
    if out_dir is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("model",) + REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["model"]] + [_fmt(r.get(c)) for c in REPORT_COLUMNS])
        (Path(out_dir) / "grid.csv").write_text(buf.getvalue())
    return rows
