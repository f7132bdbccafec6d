"""Train GSP and GAP models on 48x48 patches and test both on full images of growing size.

Writes to OUT (default out/generalization):
  metrics.csv      GSP / GAP full-image rows plus GAP-C and GAP-PS tiled rows
  by_size.csv      mean predicted/true count per test-image side length
  tiles.csv        per-tile predictions of the tiled GAP evaluation
  train_gsp.csv, train_gap.csv
  cam/             heatmap and overlay rasters for a few test images (both heads)
  probe.csv        top pooled GSP activations on nested crops of the largest test image

Usage: python scripts/generalization_experiment.py [--epochs N] [--out DIR]
"""
import argparse
import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from gspcount.cli import nested_crops
from gspcount.evaluate import (compute_cam, format_summary, linearity_probe, render_cam_overlay, write_metrics_csv,
                               write_tiles_csv)
from gspcount.experiments import GeneralizationSetup, run_generalization


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=None, help="override the 40-epoch protocol")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default="out/generalization")
    args = parser.parse_args()

    setup = GeneralizationSetup()
    if args.epochs is not None:
        setup = replace(setup, train=replace(setup.train, epochs=args.epochs))
    if args.seed is not None:
        setup = replace(setup, seed=args.seed)
    out = Path(args.out)
    (out / "cam").mkdir(parents=True, exist_ok=True)

    result = run_generalization(setup)
    rows = {"GSP": result.gsp_full.metrics, "GAP": result.gap_full.metrics,
            "GAP-C": result.gap_tiled.metrics, "GAP-PS": result.gap_tiled.patch_metrics}
    write_metrics_csv(out / "metrics.csv", rows)
    write_tiles_csv(out / "tiles.csv", result.gap_tiled.reports)
    result.gsp_log.write_csv(out / "train_gsp.csv")
    result.gap_log.write_csv(out / "train_gap.csv")

    with open(out / "by_size.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["side", "gsp_ratio", "gap_full_ratio", "gap_tiled_ratio"])
        for size in setup.test_sizes:
            writer.writerow([size] + [f"{result.ratio_at(size, r):.4f}"
                                      for r in (result.gsp_full, result.gap_full, result.gap_tiled)])

    images = sorted(result.test_images, key=lambda im: (im.height, im.id))
    for im in (images[0], images[len(images) // 2], images[-1]):
        for name, model in (("gsp", result.gsp_model), ("gap", result.gap_model)):
            render_cam_overlay(compute_cam(model, im), im, out / "cam" / f"{im.id}_{name}")

    largest = images[-1]
    crops = nested_crops(largest.width, largest.height, result.gsp_model.min_input_size, steps=6)
    k = min(48, result.gsp_model.config.feature_dim)
    linearity_probe(result.gsp_model, largest, crops, k).write_csv(out / "probe.csv")

    print(format_summary(rows, result.gap_tiled.cancellation))
    print("side  GSP pred/gt  GAP pred/gt  GAP-C pred/gt")
    for size in setup.test_sizes:
        print(f"{size:>4}  {result.ratio_at(size, result.gsp_full):>11.3f}  {result.ratio_at(size):>11.3f}  "
              f"{result.ratio_at(size, result.gap_tiled):>13.3f}")
    print(f"total {result.seconds:.0f} s; outputs in {out}")


if __name__ == "__main__":
    main()
