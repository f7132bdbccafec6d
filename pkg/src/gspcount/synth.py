"""Synthetic annotated counting images, patch labeling and patch sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import AnnotationError, CapacityError, ConfigError, DimensionError, GeometryError

RULES = ("dots", "shrunk_boxes")
RENDERERS = ("disk", "gaussian", "square")
SHRINK_FACTOR = 0.25

Rect = tuple[int, int, int, int]  # (x0, y0, w, h), pixel units, half-open


@dataclass
class AnnotatedImage:
    """Image ``pixels`` [C,H,W] in [0,1] with dot centers ``(x, y)`` and optional boxes.

    ``dots`` may be ``None`` for images that only carry a scalar ``count``.
    """

    pixels: np.ndarray
    dots: np.ndarray | None
    boxes: np.ndarray | None = None
    id: str = ""
    count: int | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise DimensionError(f"pixels must be [C,H,W], got shape {self.pixels.shape}")
        if self.dots is not None:
            self.dots = np.asarray(self.dots, dtype=np.float64).reshape(-1, 2)
        if self.boxes is not None:
            self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
            if self.dots is not None and len(self.boxes) != len(self.dots):
                raise AnnotationError(f"{self.id}: {len(self.dots)} dots but {len(self.boxes)} boxes")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def has_annotations(self) -> bool:
        return self.dots is not None

    @property
    def total_count(self) -> int:
        if self.dots is not None:
            return len(self.dots)
        if self.count is None:
            raise AnnotationError(f"{self.id}: no dots and no scalar count")
        return self.count


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a synthetic scene."""

    height: int = 128
    width: int = 128
    n_min: int = 5
    n_max: int = 25
    r_min: float = 3.0
    r_max: float = 4.0
    separation: float = 10.0
    noise: float = 0.2
    renderer: str = "disk"
    channels: int = 1
    keep_inside: bool = True

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ConfigError(f"image size and channels must be positive: {self}")
        if not 0 <= self.n_min <= self.n_max:
            raise ConfigError(f"need 0 <= n_min <= n_max, got [{self.n_min}, {self.n_max}]")
        if not 0 < self.r_min <= self.r_max:
            raise ConfigError(f"need 0 < r_min <= r_max, got [{self.r_min}, {self.r_max}]")
        if self.separation < 2 * self.r_max:
            raise ConfigError(f"separation {self.separation} < 2*r_max ({2 * self.r_max}); objects could overlap")
        if not 0 <= self.noise <= 1:
            raise ConfigError(f"noise amplitude must lie in [0,1], got {self.noise}")
        if self.renderer not in RENDERERS:
            raise ConfigError(f"renderer must be one of {RENDERERS}, got {self.renderer!r}")
        if self.keep_inside and (2 * self.r_max > self.height or 2 * self.r_max > self.width):
            raise ConfigError("objects do not fit inside the image")

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "SceneSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(mapping) - set(kinds)
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in mapping.items():
            kwargs[key] = _parse_field(key, kinds[key], raw)
        return cls(**kwargs)

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]


def _parse_field(key: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


@dataclass
class PatchSample:
    pixels: np.ndarray
    count: int
    source_id: str
    rect: Rect


# ---------------------------------------------------------------------------
# rendering


def _profile(d: np.ndarray, r: float, renderer: str) -> np.ndarray:
    if renderer == "disk":
        return np.where(d < r, 0.5 * (1.0 + np.cos(np.pi * np.minimum(d, r) / r)), 0.0)
    if renderer == "gaussian":
        sigma = r / 2.0
        return np.where(d < r, np.exp(-0.5 * (d / sigma) ** 2), 0.0)
    raise ConfigError(f"no radial profile for renderer {renderer!r}")


def _render(objects: np.ndarray, h: int, w: int, renderer: str) -> np.ndarray:
    layer = np.zeros((h, w))
    for cx, cy, r in objects:
        y0, y1 = max(int(math.floor(cy - r)), 0), min(int(math.ceil(cy + r)) + 1, h)
        x0, x1 = max(int(math.floor(cx - r)), 0), min(int(math.ceil(cx + r)) + 1, w)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        # pixel (i, j) covers [j, j+1) x [i, i+1); sample at its center
        px, py = xx + 0.5 - cx, yy + 0.5 - cy
        if renderer == "square":
            patch = ((np.abs(px) < r) & (np.abs(py) < r)).astype(np.float64)
        else:
            patch = _profile(np.hypot(px, py), r, renderer)
        layer[y0:y1, x0:x1] = np.maximum(layer[y0:y1, x0:x1], patch)
    return layer


def generate_image(spec: SceneSpec, seed, image_id: str = "") -> AnnotatedImage:
    """Render ``n ~ U{n_min..n_max}`` objects at rejection-sampled, well-separated centers."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(spec.n_min, spec.n_max + 1))
    h, w = spec.height, spec.width
    budget = 10 * spec.n_max * 100
    centers: list[tuple[float, float]] = []
    radii: list[float] = []
    attempts = 0
    while len(centers) < n:
        if attempts >= budget:
            raise CapacityError(
                f"placed only {len(centers)} of {n} objects in {budget} attempts; "
                f"reduce the object count or the separation ({spec.separation})")
        attempts += 1
        r = float(rng.uniform(spec.r_min, spec.r_max))
        margin = spec.r_max if spec.keep_inside else 0.0
        cx = float(rng.uniform(margin, w - margin))
        cy = float(rng.uniform(margin, h - margin))
        if cx >= w or cy >= h:
            continue
        if centers:
            c = np.asarray(centers)
            if np.min(np.hypot(c[:, 0] - cx, c[:, 1] - cy)) < spec.separation:
                continue
        centers.append((cx, cy))
        radii.append(r)
    dots = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    rad = np.asarray(radii, dtype=np.float64)
    objects = np.column_stack([dots, rad]) if n else np.zeros((0, 3))
    layer = _render(objects, h, w, spec.renderer)
    noise = rng.uniform(0.0, spec.noise, (spec.channels, h, w)) if spec.noise > 0 else np.zeros((spec.channels, h, w))
    pixels = noise * (1.0 - layer) + layer
    boxes = np.zeros((0, 4))
    if n:
        x0 = np.clip(dots[:, 0] - rad, 0, w)
        y0 = np.clip(dots[:, 1] - rad, 0, h)
        x1 = np.clip(dots[:, 0] + rad, 0, w)
        y1 = np.clip(dots[:, 1] + rad, 0, h)
        boxes = np.column_stack([x0, y0, x1 - x0, y1 - y0])
    return AnnotatedImage(pixels, dots, boxes, image_id)


def image_seed(master_seed: int, index: int) -> list[int]:
    """Per-image seed, so images can be generated independently and in any order."""
    return [int(master_seed), int(index)]


def generate_images(spec: SceneSpec, n_images: int, seed: int, prefix: str = "img") -> list[AnnotatedImage]:
    return [generate_image(spec, image_seed(seed, i), f"{prefix}{i:04d}") for i in range(n_images)]


# ---------------------------------------------------------------------------
# labeling


def shrink_box(box, factor: float = SHRINK_FACTOR) -> tuple[float, float, float, float]:
    """Centered box scaled by ``factor`` along each dimension."""
    x0, y0, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise GeometryError(f"box {box} must have positive width and height")
    if not 0 < factor <= 1:
        raise GeometryError(f"shrink factor must lie in (0, 1], got {factor}")
    if factor == 1:
        return x0, y0, w, h
    nw, nh = factor * w, factor * h
    return x0 + (w - nw) / 2, y0 + (h - nh) / 2, nw, nh


def _check_rect(image: AnnotatedImage, rect) -> Rect:
    x0, y0, w, h = (int(v) for v in rect)
    if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > image.width or y0 + h > image.height:
        raise GeometryError(f"rect {rect} is not inside the {image.width}x{image.height} image")
    return x0, y0, w, h


def count_in_rect(image: AnnotatedImage, rect, rule: str = "dots", factor: float = SHRINK_FACTOR) -> int:
    """Objects attributed to ``rect``.

    ``dots``: centers with ``x0 <= x < x0+w`` and ``y0 <= y < y0+h``.
    ``shrunk_boxes``: instances whose shrunken central box lies fully inside.
    """
    x0, y0, w, h = _check_rect(image, rect)
    if rule == "dots":
        if image.dots is None:
            raise AnnotationError(f"{image.id}: no dot annotations")
        d = image.dots
        inside = (d[:, 0] >= x0) & (d[:, 0] < x0 + w) & (d[:, 1] >= y0) & (d[:, 1] < y0 + h)
        return int(inside.sum())
    if rule == "shrunk_boxes":
        if image.boxes is None:
            raise AnnotationError(f"{image.id}: rule 'shrunk_boxes' needs bounding boxes")
        if len(image.boxes) == 0:
            return 0
        b = image.boxes
        nw, nh = b[:, 2] * factor, b[:, 3] * factor
        sx, sy = b[:, 0] + (b[:, 2] - nw) / 2, b[:, 1] + (b[:, 3] - nh) / 2
        inside = (sx >= x0) & (sx + nw <= x0 + w) & (sy >= y0) & (sy + nh <= y0 + h)
        return int(inside.sum())
    raise ConfigError(f"unknown labeling rule {rule!r}; expected one of {RULES}")


def crop(image: AnnotatedImage, rect) -> np.ndarray:
    x0, y0, w, h = _check_rect(image, rect)
    return image.pixels[:, y0:y0 + h, x0:x0 + w]


def _patch(image: AnnotatedImage, rect: Rect, rule: str) -> PatchSample:
    return PatchSample(crop(image, rect), count_in_rect(image, rect, rule), image.id, rect)


def sample_random_patch(image: AnnotatedImage, size: int, rule: str, rng: np.random.Generator) -> PatchSample:
    """Square patch with a uniformly random top-left corner."""
    if size < 1 or size > min(image.height, image.width):
        raise DimensionError(f"patch size {size} does not fit the {image.width}x{image.height} image")
    x0 = int(rng.integers(0, image.width - size + 1))
    y0 = int(rng.integers(0, image.height - size + 1))
    return _patch(image, (x0, y0, size, size), rule)


def centered_rect(x: float, y: float, size: int, width: int, height: int) -> Rect:
    x0 = int(math.floor(x - size / 2 + 0.5))
    y0 = int(math.floor(y - size / 2 + 0.5))
    x0 = min(max(x0, 0), width - size)
    y0 = min(max(y0, 0), height - size)
    return x0, y0, size, size


def sample_object_centered_patch(image: AnnotatedImage, size: int, rule: str,
                                 rng: np.random.Generator) -> PatchSample:
    """Square patch centered on a randomly chosen dot, clamped to the image."""
    if image.dots is None or len(image.dots) == 0:
        raise AnnotationError(f"{image.id}: object-centered sampling needs at least one dot")
    if size < 1 or size > min(image.height, image.width):
        raise DimensionError(f"patch size {size} does not fit the {image.width}x{image.height} image")
    x, y = image.dots[int(rng.integers(0, len(image.dots)))]
    return _patch(image, centered_rect(x, y, size, image.width, image.height), rule)


def tile_patches(image_or_shape, size: int) -> list[Rect]:
    """Row-major grid of non-overlapping tiles; edge tiles are clipped, not dropped."""
    if size < 1:
        raise DimensionError(f"tile size must be positive, got {size}")
    if isinstance(image_or_shape, AnnotatedImage):
        h, w = image_or_shape.height, image_or_shape.width
    else:
        h, w = image_or_shape
    return [(x0, y0, min(size, w - x0), min(size, h - y0))
            for y0 in range(0, h, size) for x0 in range(0, w, size)]
