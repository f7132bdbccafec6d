"""Full-image and tiled inference, counting metrics, cancellation accounting, CAMs."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .dataset import Dataset, write_raster
from .errors import ContractError, DimensionError
from .synth import AnnotatedImage, Rect, count_in_rect, tile_patches

# Relative metrics average per-image relative errors; %RMAE divides total
# absolute error by total ground truth. Emitted next to every metrics table.
METRIC_CONVENTION = "%MAE/%RMSE = per-image relative errors averaged; %RMAE = 100*sum|e|/sum(y)"


def _pixels(image) -> np.ndarray:
    if isinstance(image, AnnotatedImage):
        return image.pixels
    if isinstance(image, T.Tensor):
        return image.data
    return np.asarray(image, dtype=np.float64)


def infer_full(model, image) -> float:
    """Single forward pass over the whole image; the count is not clamped."""
    count, _ = model.forward(_pixels(image))
    return count.item()


# ---------------------------------------------------------------------------
# tiled inference


@dataclass
class TileRecord:
    rect: Rect
    pred: float
    gt: int | None
    padded_area: int = 0

    @property
    def error(self) -> float | None:
        return None if self.gt is None else self.pred - self.gt


@dataclass
class TiledInferenceReport:
    """Per-tile predictions and the over/underestimate decomposition of one image."""

    image_id: str
    tiles: list[TileRecord]
    image_gt: int | None = None

    @property
    def has_tile_gt(self) -> bool:
        return all(t.gt is not None for t in self.tiles)

    @property
    def cumulative_prediction(self) -> float:
        return math.fsum(t.pred for t in self.tiles)

    @property
    def tile_gt_total(self) -> int | None:
        return sum(t.gt for t in self.tiles) if self.has_tile_gt else None

    @property
    def overestimate(self) -> float | None:
        """E_O: sum of positive per-tile errors."""
        if not self.has_tile_gt:
            return None
        return math.fsum(e for e in (t.error for t in self.tiles) if e > 0)

    @property
    def underestimate(self) -> float | None:
        """E_U: sum of magnitudes of negative per-tile errors."""
        if not self.has_tile_gt:
            return None
        return math.fsum(-e for e in (t.error for t in self.tiles) if e < 0)

    @property
    def apparent_error(self) -> float | None:
        if not self.has_tile_gt:
            return None
        return abs(self.overestimate - self.underestimate)

    @property
    def actual_error(self) -> float | None:
        if not self.has_tile_gt:
            return None
        return self.overestimate + self.underestimate

    @property
    def padded_tiles(self) -> int:
        return sum(1 for t in self.tiles if t.padded_area)


def tiled_report(image_id: str, rects: Sequence[Rect], preds: Sequence[float],
                 gts: Sequence[int] | None, padded: Sequence[int] | None = None,
                 image_gt: int | None = None) -> TiledInferenceReport:
    if gts is not None and len(gts) != len(rects):
        raise DimensionError(f"{len(rects)} tiles but {len(gts)} ground-truth counts")
    if len(preds) != len(rects):
        raise DimensionError(f"{len(rects)} tiles but {len(preds)} predictions")
    padded = padded or [0] * len(rects)
    tiles = [TileRecord(tuple(r), float(p), None if gts is None else int(g), int(a))
             for r, p, g, a in zip(rects, preds, gts if gts is not None else [None] * len(rects), padded)]
    if image_gt is None and gts is not None:
        image_gt = int(sum(gts))
    return TiledInferenceReport(image_id, tiles, image_gt)


def _tile_inputs(pixels: np.ndarray, rects: Sequence[Rect], min_size: int):
    out, padded = [], []
    for x0, y0, w, h in rects:
        tile = pixels[:, y0:y0 + h, x0:x0 + w]
        ph, pw = max(h, min_size), max(w, min_size)
        if (ph, pw) != (h, w):
            grown = np.zeros((pixels.shape[0], ph, pw))
            grown[:, :h, :w] = tile
            tile = grown
        out.append(tile)
        padded.append(ph * pw - h * w)
    return out, padded


def predict_batch(model, tiles: Sequence[np.ndarray]) -> list[float]:
    """Forward a list of [C,h,w] arrays, stacking equal shapes into one batch."""
    preds: list[float] = [0.0] * len(tiles)
    groups: dict[tuple, list[int]] = {}
    for i, t in enumerate(tiles):
        groups.setdefault(t.shape, []).append(i)
    for idx in groups.values():
        batch = np.stack([tiles[i] for i in idx])
        count, _ = model.forward(batch)
        for i, v in zip(idx, np.atleast_1d(count.data)):
            preds[i] = float(v)
    return preds


def infer_tiled(model, image: AnnotatedImage, patch_size: int, rule: str = "dots") -> TiledInferenceReport:
    """Predict each non-overlapping tile; undersized edge tiles are zero-padded to the model minimum."""
    rects = tile_patches(image, patch_size)
    tiles, padded = _tile_inputs(image.pixels, rects, model.min_input_size)
    preds = predict_batch(model, tiles)
    gts = None
    image_gt = image.count
    if image.has_annotations:
        usable = rule == "dots" or image.boxes is not None
        if usable:
            gts = [count_in_rect(image, r, rule) for r in rects]
        image_gt = image.total_count
    return tiled_report(image.id, rects, preds, gts, padded, image_gt)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    pct_mae: float | None
    pct_rmse: float | None
    pct_rmae: float | None
    n: int
    preds: np.ndarray = field(repr=False)
    gts: np.ndarray = field(repr=False)

    def as_row(self) -> dict[str, float | None]:
        return {"MAE": self.mae, "RMSE": self.rmse, "%MAE": self.pct_mae,
                "%RMSE": self.pct_rmse, "%RMAE": self.pct_rmae}


def compute_metrics(preds, gts, relative: bool | None = None) -> MetricsReport:
    """MAE, RMSE and the three percentage metrics.

    The relative metrics need every ground truth to be positive. With
    ``relative=None`` they are reported as ``None`` when that fails; with
    ``relative=True`` a non-positive ground truth raises.
    """
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(gts, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise DimensionError(f"{p.size} predictions but {y.size} ground truths")
    if p.size == 0:
        raise DimensionError("metrics need at least one image")
    n = p.size
    err = p - y
    mae = math.fsum(np.abs(err)) / n
    rmse = math.sqrt(math.fsum(err * err) / n)
    positive = bool((y > 0).all())
    if relative and not positive:
        raise ContractError("relative metrics need strictly positive ground truth counts")
    if positive and relative is not False:
        rel = err / y
        pct_mae = 100.0 * math.fsum(np.abs(rel)) / n
        pct_rmse = 100.0 * math.sqrt(math.fsum(rel * rel) / n)
        pct_rmae = 100.0 * mae * n / math.fsum(y)
    else:
        pct_mae = pct_rmse = pct_rmae = None
    return MetricsReport(mae, rmse, pct_mae, pct_rmse, pct_rmae, n, p, y)


# ---------------------------------------------------------------------------
# class activation maps


@dataclass
class CamMap:
    heatmap: np.ndarray
    head: str
    bias: float
    prediction: float

    @property
    def feature_shape(self) -> tuple[int, int]:
        return self.heatmap.shape

    @property
    def pooled(self) -> float:
        return math.fsum(self.heatmap.reshape(-1)) / (1 if self.head == "gsp" else self.heatmap.size)

    def identity_error(self) -> float:
        """Relative mismatch between pooled heatmap + bias and the prediction."""
        recon = self.pooled + self.bias
        return abs(recon - self.prediction) / max(1.0, abs(self.prediction))


def compute_cam(model, image) -> CamMap:
    count, fmap = model.forward(_pixels(image))
    heat = np.tensordot(model.weight.data, fmap.data, axes=(0, 0))
    return CamMap(heat, model.head, float(model.bias.data.reshape(())), count.item())


def upsample_nearest(heat: np.ndarray, height: int, width: int) -> np.ndarray:
    hh, hw = heat.shape
    rows = np.minimum(np.arange(height) * hh // height, hh - 1)
    cols = np.minimum(np.arange(width) * hw // width, hw - 1)
    return heat[rows][:, cols]


def normalize_unit(heat: np.ndarray) -> np.ndarray:
    lo, hi = heat.min(), heat.max()
    if hi <= lo:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


def _jet(v: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return np.stack([r, g, b])


def render_cam_overlay(cam: CamMap, image, path, alpha: float = 0.5) -> tuple[Path, Path]:
    """Write ``<path>_heatmap.pgm`` (8-bit, min->0, max->255) and ``<path>_overlay.ppm``."""
    pixels = _pixels(image)
    _, h, w = pixels.shape
    unit = normalize_unit(upsample_nearest(cam.heatmap, h, w))
    base = Path(path)
    heat_path = base.with_name(base.name + "_heatmap.pgm")
    overlay_path = base.with_name(base.name + "_overlay.ppm")
    write_raster(heat_path, unit[None], maxval=255)
    gray = np.broadcast_to(pixels.mean(axis=0), (3, h, w))
    write_raster(overlay_path, (1 - alpha) * gray + alpha * _jet(unit), maxval=255)
    return heat_path, overlay_path


# ---------------------------------------------------------------------------
# linearity probe


@dataclass
class ProbeTable:
    crops: list[Rect]
    order: np.ndarray
    rows: np.ndarray  # [n_crops, k]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x0", "y0", "w", "h"] + [f"f{int(i)}" for i in self.order])
            for rect, row in zip(self.crops, self.rows):
                writer.writerow(list(rect) + [repr(float(v)) for v in row])


def pooled_vector(model, pixels: np.ndarray) -> np.ndarray:
    _, fmap = model.forward(pixels)
    return T.gsp(fmap).data


def linearity_probe(model, image, crops: Sequence[Rect], k: int) -> ProbeTable:
    """Top-``k`` pooled activations per crop, in the full image's descending order."""
    if model.head != "gsp":
        raise ContractError("the linearity probe needs a GSP-head model")
    pixels = _pixels(image)
    _, h, w = pixels.shape
    full = pooled_vector(model, pixels)
    if not 1 <= k <= full.size:
        raise ContractError(f"k must lie in [1, {full.size}], got {k}")
    order = np.argsort(-full, kind="stable")[:k]
    rows = []
    for rect in crops:
        x0, y0, cw, ch = (int(v) for v in rect)
        if x0 < 0 or y0 < 0 or cw < 1 or ch < 1 or x0 + cw > w or y0 + ch > h:
            raise DimensionError(f"crop {rect} is outside the {w}x{h} image")
        vec = pooled_vector(model, pixels[:, y0:y0 + ch, x0:x0 + cw])
        rows.append(vec[order])
    return ProbeTable([tuple(int(v) for v in r) for r in crops], order, np.asarray(rows).reshape(len(crops), k))


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass
class SuiteResult:
    mode: str
    ids: list[str]
    preds: np.ndarray
    gts: np.ndarray
    metrics: MetricsReport
    reports: list[TiledInferenceReport] = field(default_factory=list)
    patch_metrics: MetricsReport | None = None  # per-patch summed errors (GAP-PS style)

    @property
    def cancellation(self) -> dict[str, float] | None:
        """Mean apparent error, mean actual error and mean apparent/actual ratio."""
        return cancellation_aggregates(self.reports) if self.reports else None


def cancellation_aggregates(reports: Sequence[TiledInferenceReport]) -> dict[str, float] | None:
    usable = [r for r in reports if r.has_tile_gt]
    if not usable:
        return None
    apparent = [r.apparent_error for r in usable]
    actual = [r.actual_error for r in usable]
    ratios = [a / b for a, b in zip(apparent, actual) if b > 0]
    return {
        "mean_apparent": math.fsum(apparent) / len(usable),
        "mean_actual": math.fsum(actual) / len(usable),
        "mean_ratio": math.fsum(ratios) / len(ratios) if ratios else float("nan"),
    }


def evaluate_suite(model, ds: Dataset | Sequence[AnnotatedImage], mode: str = "full",
                   patch_size: int | None = None, rule: str = "dots", split: str | None = "test") -> SuiteResult:
    """Evaluate over a split with full-image or tiled inference.

    In tiled mode ``metrics`` scores the summed tile counts against the image
    count and ``patch_metrics`` scores the summed absolute per-tile errors.
    """
    images = ds.images(split) if isinstance(ds, Dataset) else list(ds)
    if not images:
        raise DimensionError(f"no images in split {split!r}")
    images = sorted(images, key=lambda im: im.id)
    ids = [im.id for im in images]
    gts = np.array([im.total_count for im in images], dtype=np.float64)
    if mode == "full":
        preds = np.array([infer_full(model, im) for im in images])
        return SuiteResult(mode, ids, preds, gts, compute_metrics(preds, gts))
    if mode != "tiled":
        raise ContractError(f"mode must be 'full' or 'tiled', got {mode!r}")
    if patch_size is None:
        raise ContractError("tiled mode needs a patch size")
    reports = [infer_tiled(model, im, patch_size, rule) for im in images]
    preds = np.array([r.cumulative_prediction for r in reports])
    patch_metrics = None
    if all(r.has_tile_gt for r in reports):
        # per-image error is the summed absolute tile error, expressed as a pseudo-prediction
        tile_gts = np.array([r.tile_gt_total for r in reports], dtype=np.float64)
        actual = np.array([r.actual_error for r in reports])
        patch_metrics = compute_metrics(tile_gts + actual, tile_gts)
    return SuiteResult(f"tiled{patch_size}", ids, preds, gts, compute_metrics(preds, gts), reports, patch_metrics)


# ---------------------------------------------------------------------------
# csv output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows: dict[str, MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["type", "MAE", "RMSE", "%MAE", "%RMSE", "%RMAE", "N"])
        for name, m in rows.items():
            writer.writerow([name] + [_fmt(v) for v in m.as_row().values()] + [m.n])


def write_predictions_csv(path, result: SuiteResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["image_id", "gt", "pred"]
        if result.reports:
            header += ["E_O", "E_U", "apparent", "actual"]
        writer.writerow(header)
        for i, image_id in enumerate(result.ids):
            row = [image_id, _fmt(float(result.gts[i])), _fmt(float(result.preds[i]))]
            if result.reports:
                r = result.reports[i]
                row += [_fmt(r.overestimate), _fmt(r.underestimate), _fmt(r.apparent_error), _fmt(r.actual_error)]
            writer.writerow(row)


def write_tiles_csv(path, reports: Sequence[TiledInferenceReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "x0", "y0", "w", "h", "pred", "gt", "padded_area"])
        for r in reports:
            for t in r.tiles:
                writer.writerow([r.image_id, *t.rect, _fmt(t.pred), _fmt(t.gt), t.padded_area])


def read_tiles_csv(path) -> list[TiledInferenceReport]:
    grouped: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            grouped.setdefault(row["image_id"], []).append(row)
    out = []
    for image_id, rows in grouped.items():
        rects = [tuple(int(r[k]) for k in ("x0", "y0", "w", "h")) for r in rows]
        preds = [float(r["pred"]) for r in rows]
        gts = None if any(r["gt"] == "" for r in rows) else [int(r["gt"]) for r in rows]
        out.append(tiled_report(image_id, rects, preds, gts, [int(r["padded_area"]) for r in rows]))
    return out


def format_summary(rows: dict[str, MetricsReport], cancellation: dict[str, float] | None = None) -> str:
    lines = [f"{'type':<10}{'MAE':>10}{'RMSE':>10}{'%MAE':>10}{'%RMSE':>10}{'%RMAE':>10}{'N':>6}"]
    for name, m in rows.items():
        vals = [f"{v:>10.3f}" if v is not None else f"{'n/a':>10}" for v in m.as_row().values()]
        lines.append(f"{name:<10}" + "".join(vals) + f"{m.n:>6}")
    lines.append(f"({METRIC_CONVENTION})")
    if cancellation:
        lines.append("cancellation: mean apparent {mean_apparent:.3f}, mean actual {mean_actual:.3f}, "
                     "mean apparent/actual {mean_ratio:.3f}".format(**cancellation))
    return "\n".join(lines)
