"""Command-line entry point.

    imdprompter train --data-root DATA --out RUN [--config FILE] [--steps N]
    imdprompter eval --checkpoint RUN/model.safetensors --data-root DATA [--out DIR]
    imdprompter predict --checkpoint CKPT --image IMG --out DIR
    imdprompter sweep --checkpoint CKPT --data-root DATA --out DIR
    imdprompter make-synthetic --authentic-dir DIR --n 8 --seed 1 --out DATA
    imdprompter plot [--loss-csv F] [--ops-csv F] [--sweep-csv F] --out DIR

Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import dataio, pipeline, plotting
from .config import TrainConfig, load_config
from .errors import CheckpointError, ConfigError, DataError, RegionTooLarge
from .metrics import format_table, reports_to_csv
from .prompting import OpsStatistics

log = logging.getLogger("imdprompter")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4
CHECKPOINT_NAME = "model.safetensors"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def _configure_logging():
    level = os.environ.get("IMDP_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _config_from_args(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.image_size is not None:
        overrides["image_size"] = args.image_size
    if args.device is not None:
        overrides["device"] = args.device
    try:
        return cfg.replace(**overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_predictor(path, device: str | None = None, image_size: int | None = None):
    """Checkpoint -> callable ``image -> (prob map, score)``."""
    model, _ = pipeline.load_checkpoint(path, device)
    if image_size is not None:
        try:
            model.cfg = model.cfg.replace(image_size=image_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return pipeline.Predictor(model)


def _predictor_from_args(args):
    if args.seed is not None:
        torch.manual_seed(args.seed)
    return load_predictor(args.checkpoint, args.device, args.image_size)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    samples = dataio.load_dataset(args.data_root)
    out = _out_dir(args)
    loss_csv = out / "loss.csv"
    state = pipeline.train(samples, cfg, steps=args.steps, log_path=loss_csv)
    ckpt = pipeline.save_checkpoint(state.model, out / CHECKPOINT_NAME, state.ops)
    state.ops.to_csv(out / "ops.csv")
    plotting.plot_loss_curve(plotting.read_csv_rows(loss_csv), out / "loss.png")
    plotting.plot_ops_proportions(state.ops.rows(), out / "ops.png")
    print(f"trained {state.step} steps; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    predictor = _predictor_from_args(args)
    samples = dataio.load_dataset(args.data_root)
    report = pipeline.evaluate(predictor, samples, Path(args.data_root).name or "data")
    text = reports_to_csv([report])
    if args.out:
        (_out_dir(args) / "metrics.csv").write_text(text)
    print(format_table([report]))
    return EXIT_OK


def cmd_predict(args) -> int:
    predictor = _predictor_from_args(args)
    image = dataio.read_image(args.image)
    prob, score = predictor(image)
    out = _out_dir(args)
    stem = Path(args.image).stem
    png = np.clip(np.rint(np.asarray(prob) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(png, mode="L").save(out / f"{stem}_prob.png")
    sidecar = {"image": Path(args.image).name, "score": float(score), "label": int(score >= 0.5)}
    (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(json.dumps(sidecar, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    predictor = _predictor_from_args(args)
    samples = dataio.load_dataset(args.data_root)
    out = _out_dir(args)
    name = Path(args.data_root).name or "data"
    rows = pipeline.robustness_sweep(predictor, samples, name)
    extra = [{"kind": spec.kind, "level": spec.level} for spec, _ in rows]
    (out / "sweep.csv").write_text(reports_to_csv([r for _, r in rows], extra))
    table = plotting.read_csv_rows(out / "sweep.csv")
    for kind in ("jpeg", "blur"):
        plotting.plot_sweep(table, kind, out / f"sweep_{kind}.png")
    print(format_table([r for _, r in rows]))
    return EXIT_OK


def _read_authentic(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"authentic directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    samples = []
    for p in files:
        img = dataio.read_image(p)
        samples.append(dataio.ImageSample(p.stem, img, np.zeros(img.shape[:2], np.uint8), 0, "authentic"))
    return samples


def cmd_make_synthetic(args) -> int:
    authentic = _read_authentic(args.authentic_dir)
    if len(authentic) < 2:
        raise DataError(f"need at least two authentic images in {args.authentic_dir}, found {len(authentic)}")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    try:
        samples = dataio.make_synthetic_set(authentic, args.n, rng)
    except RegionTooLarge as exc:
        raise DataError(str(exc)) from exc
    dataio.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = _out_dir(args)
    made = []
    if args.loss_csv:
        made.append(plotting.plot_loss_curve(plotting.read_csv_rows(args.loss_csv), out / "loss.png"))
    if args.ops_csv:
        made.append(plotting.plot_ops_proportions(OpsStatistics.from_csv(args.ops_csv).rows(), out / "ops.png"))
    if args.sweep_csv:
        rows = plotting.read_csv_rows(args.sweep_csv)
        for kind in ("jpeg", "blur"):
            made.append(plotting.plot_sweep(rows, kind, out / f"sweep_{kind}.png"))
    if not made:
        raise ConfigError("nothing to plot: pass --loss-csv, --ops-csv or --sweep-csv")
    for p in made:
        print(p)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--image-size", type=int)
    common.add_argument("--device")

    p = argparse.ArgumentParser(prog="imdprompter", description="Cross-view prompted manipulation detector")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data-root", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-root", required=True)
    e.add_argument("--out", help="directory for metrics.csv")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", parents=[common], help="probability map for one image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    s = sub.add_parser("sweep", parents=[common], help="JPEG / blur robustness sweep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-root", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("make-synthetic", parents=[common], help="build a spliced dataset")
    m.add_argument("--authentic-dir", required=True)
    m.add_argument("--n", type=int, default=8)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_synthetic)

    g = sub.add_parser("plot", parents=[common], help="re-render figures from CSV output")
    g.add_argument("--loss-csv")
    g.add_argument("--ops-csv")
    g.add_argument("--sweep-csv")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
