"""``gspcount`` command line: gen-data, train, eval, cam, probe, gradcheck, stats.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric or
training error. The last line of every successful command is
``OUTPUTS {json}`` mapping output names to file paths.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluate as ev
from .config import ExperimentConfig, load_experiment
from .dataset import dataset_stats, format_stats, load_dataset, read_raster, write_dataset
from .errors import (AnnotationError, CapacityError, ConfigError, ContractError, DimensionError, FormatError,
                     GeometryError, LoadError, NumericError, TrainingError)
from .experiments import generate_dataset_images
from .gradcheck import run_gradient_suite
from .model import build_model, load_model, save_model
from .synth import AnnotatedImage
from .train import train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-5
CAM_TOLERANCE = 1e-9

log = logging.getLogger("gspcount")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _announce(outputs: dict[str, Path | str]) -> None:
    print("OUTPUTS " + json.dumps({k: str(v) for k, v in outputs.items()}, sort_keys=True))


def _experiment(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"experiment.seed={args.seed}")
    return load_experiment(args.config, overrides)


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _experiment(args)
    out = Path(args.out) if args.out else (cfg.dataset or cfg.resolved_out_dir() / "data")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise LoadError(f"{out} exists and is not empty; pass --force to overwrite")
        for name in ("images", "annotations", "boxes"):
            shutil.rmtree(out / name, ignore_errors=True)
        (out / "manifest.csv").unlink(missing_ok=True)
    images, splits = generate_dataset_images(cfg.scene, cfg.data, cfg.seed)
    write_dataset(out, images, splits)
    print(format_stats(dataset_stats(load_dataset(out))))
    _announce({"dataset": out, "manifest": out / "manifest.csv"})
    return EXIT_OK


def cmd_stats(args) -> int:
    ds = load_dataset(args.dataset)
    print(format_stats(dataset_stats(ds, tuple(args.split) if args.split else ds.split_names() or ("train",))))
    _announce({"dataset": args.dataset})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    model_cfg, train_cfg = cfg.model, cfg.train
    if args.head:
        model_cfg = model_cfg.with_head(args.head)
    if args.patch_size:
        train_cfg = replace(train_cfg, patch_size=None if args.patch_size == "full" else int(args.patch_size))
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    dataset = args.dataset or cfg.dataset
    if dataset is None:
        raise UsageError("train needs --dataset or [experiment] dataset")
    out = _out_dir(args, cfg)
    ds = load_dataset(dataset)
    model = build_model(model_cfg)
    model, train_log = train(model, ds, train_cfg)
    for e in train_log.epochs:
        val = "" if e.val_mae is None else f" val_mae={e.val_mae:.4f}"
        print(f"epoch {e.epoch} loss={e.loss:.6f}{val} ({e.seconds:.1f} s)")
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    save_model(model, ckpt)
    # wall-clock time goes to stdout only, so every file written here is reproducible
    log_path, cfg_path = out / "train_log.csv", out / "train_config.cfg"
    train_log.write_csv(log_path, include_time=False)
    with open(cfg_path, "w") as fh:
        fh.write("[model]\n" + "\n".join(model_cfg.to_lines()) + "\n\n[train]\n" + "\n".join(train_cfg.to_lines()) + "\n")
    _announce({"checkpoint": ckpt, "train_log": log_path, "config": cfg_path})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _experiment(args)
    model = load_model(args.checkpoint or cfg.checkpoint or _missing("--checkpoint"))
    ds = load_dataset(args.dataset or cfg.dataset or _missing("--dataset"))
    mode = args.mode or cfg.eval.mode
    patch = args.patch_size or cfg.eval.patch_size
    rule = args.rule or cfg.eval.rule
    split = args.split or cfg.eval.split
    if mode in ("tiled", "both") and not patch:
        raise UsageError("tiled evaluation needs --patch-size")
    out = _out_dir(args, cfg)
    head = model.head.upper()
    rows: dict[str, ev.MetricsReport] = {}
    outputs: dict[str, Path] = {}
    cancellation = None
    if mode in ("full", "both"):
        res = ev.evaluate_suite(model, ds, "full", split=split)
        rows[head] = res.metrics
        outputs["predictions_full"] = out / "predictions_full.csv"
        ev.write_predictions_csv(outputs["predictions_full"], res)
    if mode in ("tiled", "both"):
        res = ev.evaluate_suite(model, ds, "tiled", int(patch), rule, split=split)
        rows[f"{head}-C"] = res.metrics
        if res.patch_metrics is not None:
            rows[f"{head}-PS"] = res.patch_metrics
        outputs["predictions_tiled"] = out / "predictions_tiled.csv"
        outputs["tiles"] = out / "tiles.csv"
        ev.write_predictions_csv(outputs["predictions_tiled"], res)
        ev.write_tiles_csv(outputs["tiles"], res.reports)
        cancellation = res.cancellation
        if cancellation is not None:
            outputs["cancellation"] = out / "cancellation.csv"
            with open(outputs["cancellation"], "w") as fh:
                fh.write("mean_apparent,mean_actual,mean_ratio\n")
                fh.write(",".join(repr(cancellation[k]) for k in ("mean_apparent", "mean_actual", "mean_ratio")) + "\n")
    if mode not in ("full", "tiled", "both"):
        raise UsageError(f"unknown mode {mode!r}")
    outputs["metrics"] = out / "metrics.csv"
    ev.write_metrics_csv(outputs["metrics"], rows)
    summary = ev.format_summary(rows, cancellation)
    outputs["summary"] = out / "summary.txt"
    outputs["summary"].write_text(summary + "\n")
    print(summary)
    _announce(outputs)
    return EXIT_OK


def _missing(flag: str):
    raise UsageError(f"missing required {flag}")


def _load_image(args) -> AnnotatedImage:
    if args.image:
        return AnnotatedImage(read_raster(args.image), None, id=Path(args.image).stem)
    if args.dataset and args.id:
        ds = load_dataset(args.dataset)
        for rec in ds.records:
            if rec.id == args.id:
                return ds.image(rec)
        raise LoadError(f"image id {args.id!r} not in {args.dataset}")
    raise UsageError("give --image PATH or --dataset DIR --id ID")


def cmd_cam(args) -> int:
    model = load_model(args.checkpoint)
    image = _load_image(args)
    cam = ev.compute_cam(model, image)
    prefix = Path(args.out) if args.out else Path(image.id or "cam")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    heat_path, overlay_path = ev.render_cam_overlay(cam, image, prefix)
    err = cam.identity_error()
    pooled = "sum" if cam.head == "gsp" else "mean"
    print(f"cam {pooled}(heatmap)+b = {cam.pooled + cam.bias!r}  prediction = {cam.prediction!r}  "
          f"rel err = {err:.3e}  feature map {cam.feature_shape[0]}x{cam.feature_shape[1]}")
    if err > CAM_TOLERANCE:
        print(f"CAM identity violated (> {CAM_TOLERANCE})", file=sys.stderr)
        return EXIT_NUMERIC
    _announce({"heatmap": heat_path, "overlay": overlay_path})
    return EXIT_OK


def _parse_rect(text: str) -> tuple[int, int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"crop {text!r} must be x0,y0,w,h") from exc
    if len(vals) != 4:
        raise UsageError(f"crop {text!r} must be x0,y0,w,h")
    return vals


def nested_crops(width: int, height: int, min_size: int, steps: int = 4) -> list[tuple[int, int, int, int]]:
    """Full image plus centered crops shrinking linearly towards the model minimum."""
    crops = []
    for i in range(steps):
        frac = 1.0 - i / steps
        w = max(min_size, int(width * frac) // min_size * min_size)
        h = max(min_size, int(height * frac) // min_size * min_size)
        if i == 0:
            w, h = width, height
        rect = ((width - w) // 2, (height - h) // 2, w, h)
        if rect not in crops:
            crops.append(rect)
    return crops


def cmd_probe(args) -> int:
    model = load_model(args.checkpoint)
    image = _load_image(args)
    crops = [_parse_rect(c) for c in args.crop] if args.crop else \
        nested_crops(image.width, image.height, model.min_input_size)
    k = args.k if args.k is not None else min(48, model.config.feature_dim)
    table = ev.linearity_probe(model, image, crops, k)
    out = Path(args.out) if args.out else Path(f"{image.id or 'probe'}_probe.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(out)
    print(f"probe: {len(table.crops)} crops x {k} activations")
    _announce({"probe": out})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _experiment(args)
    results = run_gradient_suite(cfg.model, args.epsilon, cfg.seed)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name:<36} {err:.3e}")
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {GRADCHECK_TOLERANCE:g})")
    if not ok:
        return EXIT_NUMERIC
    _announce({})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gspcount", description="Object counting with global sum pooling.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="experiment config file (INI key=value sections)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--seed", type=int, help="global seed")
        if out:
            sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("stats", help="print dataset statistics")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", action="append", help="split to report (repeatable)")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("train", help="train a counting model")
    common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--checkpoint", help="checkpoint path (default OUT/model.ckpt)")
    sp.add_argument("--head", choices=("gsp", "gap"))
    sp.add_argument("--patch-size", help="training patch size or 'full'")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--mode", choices=("full", "tiled", "both"))
    sp.add_argument("--patch-size", type=int)
    sp.add_argument("--rule", choices=("dots", "shrunk_boxes"))
    sp.add_argument("--split")
    sp.set_defaults(func=cmd_eval)

    for name, func, helptext in (("cam", cmd_cam, "export a class activation map"),
                                 ("probe", cmd_probe, "pooled-activation linearity probe")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--image", help="raster file (.pgm/.ppm/.png)")
        sp.add_argument("--dataset")
        sp.add_argument("--id", help="image id within --dataset")
        sp.add_argument("--out", help="output prefix (cam) or CSV path (probe)")
        if name == "probe":
            sp.add_argument("--crop", action="append", metavar="X0,Y0,W,H")
            sp.add_argument("--k", type=int, help="activations per crop (default min(48, feature dim))")
        sp.set_defaults(func=func)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(sp, out=False)
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"gspcount {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, FormatError, AnnotationError, GeometryError, CapacityError, DimensionError) as exc:
        print(f"gspcount {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingError) as exc:
        print(f"gspcount {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
