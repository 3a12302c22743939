"""``jointsal`` command line: synth, train, predict, metrics.

Exit codes: 0 ok, 2 usage/config, 3 data, 4 divergence, 5 checkpoint version.
"""

from __future__ import annotations

import argparse
import csv
import shutil
import sys
from pathlib import Path

import numpy as np

from . import formats
from .config import ModelConfig, TrainConfig, config_help, load_config
from .data import SynthConfig, generate_dataset
from .errors import ConfigError, DataError, JointSalError
from .metrics import REPORT_COLUMNS, evaluate, format_table
from .train import load_model, prediction_to_map, reference_mode, run_experiment, run_grid

_DATASET_DIRS = ("images", "maps", "fixations", "masks")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _cmd_synth(args) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
        for sub in _DATASET_DIRS:
            shutil.rmtree(out / sub, ignore_errors=True)
    cfg = SynthConfig(height=args.height, width=args.width, num_classes=args.classes)
    samples = generate_dataset(args.n, args.seed, cfg, mode=args.mode, workers=args.workers)
    formats.save_dataset(samples, out)
    n_fix = sum(len(s.fixations) for s in samples if s.fixations is not None)
    n_masks = sum(s.mask is not None for s in samples)
    print(f"wrote {len(samples)} images, {n_fix} fixations, {n_masks} masks to {out}")
    return 0


def _print_row(row: dict) -> None:
    if "auc_judd" in row:
        print(f"epoch {row['epoch']} step {row['step'] + 1}: total {row['total']:.5f}  "
              f"AUC-Judd {row['auc_judd']:.4f}  NSS {row['nss']:.4f}", flush=True)


def _cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config) if args.config else (ModelConfig(), TrainConfig())
    needs_seg = train_cfg.loss_lambda > 0 and (model_cfg.multi_task or args.grid)
    if needs_seg and not args.data_seg:
        raise ConfigError(
            f"lambda = {train_cfg.loss_lambda} > 0 requires --data-seg (set train.lambda = 0 to train without it)"
        )
    hw = (model_cfg.input_height, model_cfg.input_width)
    sal = formats.load_dataset(args.data_sal, hw)
    seg = formats.load_dataset(args.data_seg, hw) if args.data_seg else None
    with reference_mode():
        if args.grid:
            rows = run_grid(model_cfg, train_cfg, sal, seg, args.out)
            print(format_table(rows, label="model"))
            return 0
        res = run_experiment(model_cfg, train_cfg, sal, seg if needs_seg else None, args.out,
                             resume=args.resume, log=_print_row)
    print(f"finished at step {res.step}; checkpoint {res.checkpoint_path}")
    return 0


def _image_paths(path: Path) -> dict:
    if (path / "images").is_dir():
        path = path / "images"
    found = {p.stem: p for p in sorted(path.iterdir()) if p.suffix in (".ppm", ".pgm")}
    if not found:
        raise DataError(f"no .ppm/.pgm images in {path}")
    return found


def _cmd_predict(args) -> int:
    model, _ = load_model(args.checkpoint)
    hw = model.in_hw
    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    if args.emit_seg:
        (out / "masks").mkdir(exist_ok=True)
    if args.emit_png:
        (out / "previews").mkdir(exist_ok=True)
        from PIL import Image
    with reference_mode():
        for sid, path in _image_paths(Path(args.images)).items():
            image = formats.read_image(path)
            if image.shape[1:] != hw:
                image = formats.pad_and_resize(image, hw)
            sal, masks = model.predict(image[None], emit_seg=args.emit_seg)
            m = prediction_to_map(sal[0])
            formats.write_pfm(out / "maps" / f"{sid}.pfm", m)
            if args.emit_seg and masks is not None:
                formats.write_pnm(out / "masks" / f"{sid}.pgm", masks[0].astype(np.uint8))
            if args.emit_png:
                preview = np.round(m / m.max() * 255.0).astype(np.uint8)
                Image.fromarray(preview, mode="L").save(out / "previews" / f"{sid}.png")
    print(f"wrote predictions to {out}")
    return 0


def _map_dir(path: Path, sub: str, ext: str) -> dict:
    if (path / sub).is_dir():
        path = path / sub
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    return {p.stem: p for p in sorted(path.iterdir()) if p.suffix == ext}


def _cmd_metrics(args) -> int:
    preds = {k: formats.read_pfm(p) for k, p in _map_dir(Path(args.pred), "maps", ".pfm").items()}
    gts = {k: formats.read_pfm(p) for k, p in _map_dir(Path(args.gt), "maps", ".pfm").items()}
    fixs = {k: formats.read_fixations(p) for k, p in _map_dir(Path(args.fix), "fixations", ".txt").items()}
    pool = None
    if args.shuffle_pool:
        pool = {k: formats.read_fixations(p) for k, p in _map_dir(Path(args.shuffle_pool), "fixations", ".txt").items()}
    report = evaluate(preds, gts, fixs, shuffle_pool=pool)
    rows = report.per_image + [{"id": "mean", **report.row()}]
    table = format_table(rows)
    print(table)
    if args.report:
        base = Path(args.report)
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(base.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("id",) + REPORT_COLUMNS)
            for r in rows:
                w.writerow([r["id"]] + ["" if r[c] is None else repr(float(r[c])) for c in REPORT_COLUMNS])
        base.with_suffix(".txt").write_text(table + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointsal", description=__doc__, formatter_class=_HelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=_HelpFormatter)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=100, help="number of images")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--mode", choices=("saliency", "segmentation", "both"), default="saliency",
                   help="which annotations to write")
    p.add_argument("--height", type=int, default=48, help="image height")
    p.add_argument("--width", type=int, default=64, help="image width")
    p.add_argument("--classes", type=int, default=4, help="number of classes including background")
    p.add_argument("--workers", type=int, default=1, help="generator threads (output does not depend on it)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model", formatter_class=_HelpFormatter,
                       epilog="config keys and defaults:\n" + config_help())
    p.add_argument("--config", default=None, help="TOML config with [model] and [train] tables")
    p.add_argument("--data-sal", required=True, help="saliency dataset directory")
    p.add_argument("--data-seg", default=None, help="segmentation dataset directory (required when lambda > 0)")
    p.add_argument("--out", required=True, help="run directory for checkpoint, history and config echo")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--grid", action="store_true", help="train all seven ablation rows into subdirectories")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="predict saliency maps", formatter_class=_HelpFormatter)
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--images", required=True, help="image directory or dataset root")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--emit-seg", action="store_true", help="also write argmax segmentation masks")
    p.add_argument("--emit-png", action="store_true", help="also write 8-bit grayscale PNG previews")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("metrics", help="evaluate predicted maps", formatter_class=_HelpFormatter)
    p.add_argument("--pred", required=True, help="directory of predicted .pfm maps")
    p.add_argument("--gt", required=True, help="directory (or dataset root) of ground-truth .pfm maps")
    p.add_argument("--fix", required=True, help="directory (or dataset root) of fixation files")
    p.add_argument("--shuffle-pool", default=None, help="fixation directory for s-AUC negatives; omit to skip s-AUC")
    p.add_argument("--report", default=None, help="write <report>.csv and <report>.txt")
    p.set_defaults(func=_cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except JointSalError as exc:
        print(f"jointsal {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"jointsal {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
