"""Command line entry point: ``psrfcn <command> [options]``.

Every failure is reported on stderr as a single ``ERROR:<category>: message``
line with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, save_config
from .detection import format_detection, read_detections, write_detections
from .errors import ConfigError, FormatError, PsrfcnError
from .evaluation import evaluate, format_results
from .model import detect
from .ppm import CLASS_COLORS, draw_box, from_pixels, read_ppm, write_ppm
from .resnet import BlockVariant, DropoutPlacement, build_network, params_from_arrays
from .synth import SPLITS, read_dataset, write_dataset
from .tensor import get_default_dtype, set_default_dtype
from .trainer import ablation_sweep, detect_scenes, format_table, train

RUN_CONFIG_NAME = "run.cfg"
CHECKPOINT_NAME = "model.psrd"

# named model rows for the model-comparison sweep
MODELS = {
    "rfcn": (BlockVariant.ORIGINAL, DropoutPlacement.NONE),
    "proposed": (BlockVariant.ORIGINAL, DropoutPlacement.AFTER_FIRST_POOL),
}


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _config_for_checkpoint(checkpoint, explicit) -> RunConfig:
    if explicit:
        return load_config(explicit)
    sibling = Path(checkpoint).with_name(RUN_CONFIG_NAME)
    return load_config(sibling) if sibling.is_file() else RunConfig()


def _load_params(checkpoint, cfg: RunConfig):
    arrays = load_checkpoint(checkpoint)
    expected = build_network(cfg.net, np.random.default_rng(0))
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise FormatError(
            f"{checkpoint}: tensors do not match the configured network "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, t in expected.items():
        if arrays[name].shape != t.shape:
            raise FormatError(f"{checkpoint}: tensor {name} has shape {arrays[name].shape}, expected {t.shape}")
    return params_from_arrays(arrays)


# commands


def cmd_gen_data(args) -> int:
    cfg = _config(args.spec)
    spec = cfg.data if args.seed is None else dataclasses.replace(cfg.data, seed=args.seed)
    write_dataset(spec, args.out)
    print(f"wrote {spec.n_train + spec.n_val + spec.n_test} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.epochs is not None:
        cfg = cfg.replace(optim=dataclasses.replace(cfg.optim, epochs=args.epochs))
    if args.seed is not None:
        cfg = cfg.replace(optim=dataclasses.replace(cfg.optim, seed=args.seed))
    set_default_dtype(cfg.precision)
    data = read_dataset(args.data, ("train", "val"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / RUN_CONFIG_NAME)

    def progress(rec):
        print(f"{rec.epoch} {rec.loss:.4f} {rec.val_map:.4f}", flush=True)

    result = train(data, cfg.net, cfg.optim, out, cfg.train, cfg.detect, cfg.eval_iou, progress)
    if result.history:
        from .plotting import plot_training

        plot_training(result.history, out / "metrics.png")
    print(f"checkpoint {out / CHECKPOINT_NAME} after {len(result.history)} epochs, {result.seconds:.1f} s")
    return 0


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.detections is None):
        raise ConfigError("give exactly one of --checkpoint or --detections")
    data = read_dataset(args.data, (args.split,))[args.split]
    gt = {s.image_id: s.annotations for s in data}
    if args.checkpoint:
        cfg = _config_for_checkpoint(args.checkpoint, args.config)
        set_default_dtype(cfg.precision)
        params = _load_params(args.checkpoint, cfg)
        dets = detect_scenes(data, cfg.net, params, cfg.detect)
    else:
        cfg = _config(args.config)
        dets = read_detections(args.detections)
    iou = cfg.eval_iou if args.iou is None else args.iou
    result = evaluate(dets, gt, cfg.net.num_classes, iou)
    table = format_results(result)
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.txt").write_text(table, encoding="utf-8")
        if args.checkpoint:
            write_detections(out / f"detections_{args.split}.txt", dets)
        from .plotting import plot_pr_curves

        plot_pr_curves(result, out / f"pr_{args.split}.png", f"{args.split} split, IoU {iou:g}: mAP {result.mean_ap:.4f}")
    return 0


def cmd_detect(args) -> int:
    cfg = _config_for_checkpoint(args.checkpoint, args.config)
    set_default_dtype(cfg.precision)
    pixels = read_ppm(args.image)
    params = _load_params(args.checkpoint, cfg)
    image_id = Path(args.image).stem
    dets = detect(from_pixels(pixels), cfg.net, params, cfg.detect, image_id)
    shown = [d for d in dets if d.score >= args.min_score]
    canvas = pixels.copy()
    for d in shown:
        draw_box(canvas, d.box, CLASS_COLORS[d.class_id % len(CLASS_COLORS)])
    write_ppm(args.out, canvas)
    for d in shown:
        print(format_detection(d))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    layers = None if args.layers == "all" else [s.strip() for s in args.layers.split(",") if s.strip()]
    results = run_gradcheck(layers, instances=args.instances, seed=args.seed, tol=args.tol)
    for r in results:
        print(r.line())
    failed = [r.layer for r in results if not r.passed]
    if failed:
        print(f"ERROR:gradcheck: {len(failed)} layer(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def parse_sweep(text: str, base: RunConfig) -> list[tuple[str, object]]:
    """``k=1,3,7``, ``variants=ORIGINAL/NONE,...`` or ``models=rfcn,proposed``."""
    if "=" not in text:
        raise ConfigError(f"sweep must look like key=v1,v2,... got {text!r}")
    key, values = (s.strip() for s in text.split("=", 1))
    items = [v.strip() for v in values.split(",") if v.strip()]
    rows = []
    for item in items:
        if key == "k":
            try:
                k = int(item)
            except ValueError:
                raise ConfigError(f"k sweep value {item!r} is not an integer") from None
            if k < 1:
                raise ConfigError(f"k must be positive, got {k}")
            rows.append((f"k={k}", dataclasses.replace(base.net, k=k)))
        elif key == "variants":
            block, _, drop = item.partition("/")
            try:
                variant = BlockVariant(block.upper())
                placement = DropoutPlacement((drop or "NONE").upper())
            except ValueError:
                raise ConfigError(f"unknown variant {item!r}; use BLOCK/DROPOUT") from None
            rows.append((f"{variant.value}/{placement.value}", dataclasses.replace(base.net, block_variant=variant, dropout=placement)))
        elif key == "models":
            if item not in MODELS:
                raise ConfigError(f"unknown model {item!r}; choose from {', '.join(MODELS)}")
            variant, placement = MODELS[item]
            rows.append((item, dataclasses.replace(base.net, block_variant=variant, dropout=placement)))
        else:
            raise ConfigError(f"unknown sweep key {key!r}; use k, variants or models")
    if len(rows) < 2:
        raise ConfigError("a sweep needs at least two entries")
    return rows


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    if args.epochs is not None:
        cfg = cfg.replace(optim=dataclasses.replace(cfg.optim, epochs=args.epochs))
    set_default_dtype(cfg.precision)
    variants = parse_sweep(args.sweep, cfg)
    data = read_dataset(args.data, ("train", "val"))
    rows = ablation_sweep(variants, data, cfg.optim, args.out, cfg.train, cfg.detect, cfg.eval_iou)
    sys.stdout.write(format_table(rows))
    if args.out:
        from .plotting import plot_ablation

        plot_ablation(rows, Path(args.out) / "ablation.png", args.sweep)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="psrfcn", description="Position-sensitive detector experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch loss components")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    p.add_argument("--spec", help="config file; only data.* keys are used")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class AP and mAP on one split")
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="detection file instead of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=SPLITS)
    p.add_argument("--config")
    p.add_argument("--iou", type=float)
    p.add_argument("--out", help="directory for the table, detections and PR figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="draw detections on one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--min-score", type=float, default=0.5)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--layers", default="all")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train a sweep of variants and tabulate val mAP")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--sweep", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    dtype = get_default_dtype()
    try:
        return args.func(args)
    except PsrfcnError as exc:
        print(f"ERROR:{exc.category}: {exc}", file=sys.stderr)
    except OSError as exc:
        if exc.filename is not None:
            print(f"ERROR:io: {exc.filename}: {exc.strerror or exc}", file=sys.stderr)
        else:
            print(f"ERROR:io: {exc}", file=sys.stderr)
    finally:
        set_default_dtype(dtype)
    return 2


if __name__ == "__main__":
    sys.exit(main())
