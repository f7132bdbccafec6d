"""On-disk counting datasets.

Layout::

    root/manifest.csv          id,split   (header line, then one row per image)
    root/images/<id>.pgm       grayscale (P5) or .ppm colour (P6); .png if Pillow is present
    root/annotations/<id>.csv  one ``x,y`` dot per line
    root/boxes/<id>.csv        optional, one ``x0,y0,w,h`` box per line
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AnnotationError, LoadError
from .synth import AnnotatedImage

RASTER_MAX = 65535
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# rasters


def quantize(pixels: np.ndarray, maxval: int = RASTER_MAX) -> np.ndarray:
    """Values as they survive a write/read cycle through a raster of depth ``maxval``."""
    return np.round(np.clip(pixels, 0.0, 1.0) * maxval) / maxval


def write_raster(path, pixels: np.ndarray, maxval: int = RASTER_MAX) -> None:
    """Write [C,H,W] values in [0,1] as binary PGM (C=1) or PPM (C=3)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    c, h, w = pixels.shape
    if c == 1:
        magic, body = "P5", pixels[0]
    elif c == 3:
        magic, body = "P6", pixels.transpose(1, 2, 0)
    else:
        raise ValueError(f"rasters need 1 or 3 channels, got {c}")
    q = np.round(np.clip(body, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def _pnm_header(data: bytes, path) -> tuple[str, int, int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated raster header")
        tokens.append(data[start:pos])
    magic = tokens[0].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise LoadError(f"{path}: unsupported raster type {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise LoadError(f"{path}: malformed raster header") from exc
    if w < 1 or h < 1 or not 0 < maxval <= 65535:
        raise LoadError(f"{path}: invalid raster header {w}x{h} maxval={maxval}")
    return magic, w, h, maxval, pos + 1


def raster_shape(path) -> tuple[int, int, int]:
    """(C, H, W) of a raster without decoding the pixels."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        img = _open_png(path)
        c = 3 if img.mode in ("RGB", "RGBA") else 1
        return c, img.height, img.width
    with open(path, "rb") as fh:
        head = fh.read(256)
    magic, w, h, _, _ = _pnm_header(head, path)
    return (1 if magic == "P5" else 3), h, w


def _open_png(path):
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is normally installed
        raise LoadError(f"{path}: PNG support needs Pillow") from exc
    try:
        return Image.open(path)
    except OSError as exc:
        raise LoadError(f"{path}: cannot decode PNG ({exc})") from exc


def read_raster(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        img = _open_png(path)
        if img.mode in ("RGB", "RGBA"):
            arr = np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
        else:
            arr = np.asarray(img.convert("I;16") if img.mode.startswith("I") else img.convert("L"),
                             dtype=np.float64)[None]
        maxval = 65535.0 if img.mode.startswith("I") else 255.0
        return arr / maxval
    data = path.read_bytes()
    magic, w, h, maxval, offset = _pnm_header(data, path)
    c = 1 if magic == "P5" else 3
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * c
    body = np.frombuffer(data, dtype=dtype, count=min(n, (len(data) - offset) // np.dtype(dtype).itemsize),
                         offset=offset)
    if body.size != n:
        raise LoadError(f"{path}: raster truncated ({body.size} of {n} samples)")
    arr = body.astype(np.float64).reshape(h, w, c).transpose(2, 0, 1)
    return arr / maxval


# ---------------------------------------------------------------------------
# csv annotations


def _write_rows(path, rows: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_rows(path, width: int) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != width:
                raise LoadError(f"{path}:{lineno}: expected {width} values, got {line.strip()!r}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise LoadError(f"{path}:{lineno}: non-numeric value in {line.strip()!r}") from exc
            if not np.isfinite(vals).all():
                raise LoadError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    return np.asarray(rows, dtype=np.float64).reshape(-1, width)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Record:
    id: str
    split: str
    image_path: Path | None
    dots: np.ndarray
    boxes: np.ndarray | None
    shape: tuple[int, int, int]
    pixels: np.ndarray | None = None

    @property
    def count(self) -> int:
        return len(self.dots)


@dataclass
class Dataset:
    """Annotated images grouped by split; pixels are decoded on first access."""

    records: list[Record] = field(default_factory=list)
    root: Path | None = None

    @classmethod
    def from_images(cls, images: list[AnnotatedImage], splits: list[str] | str = "train") -> "Dataset":
        if isinstance(splits, str):
            splits = [splits] * len(images)
        records = [Record(im.id, s, None, im.dots, im.boxes, im.pixels.shape, im.pixels)
                   for im, s in zip(images, splits)]
        return cls(records)

    def __len__(self) -> int:
        return len(self.records)

    def split_names(self) -> list[str]:
        return sorted({r.split for r in self.records})

    def records_for(self, split: str | None = None) -> list[Record]:
        return [r for r in self.records if split is None or r.split == split]

    def image(self, record: Record) -> AnnotatedImage:
        if record.pixels is None:
            pixels = read_raster(record.image_path)
            if pixels.shape != record.shape:
                raise LoadError(f"{record.image_path}: decoded shape {pixels.shape} != header {record.shape}")
            record.pixels = pixels
        return AnnotatedImage(record.pixels, record.dots, record.boxes, record.id)

    def images(self, split: str | None = None) -> list[AnnotatedImage]:
        return [self.image(r) for r in self.records_for(split)]


def write_dataset(root, images: list[AnnotatedImage], splits: list[str] | str = "train",
                  fmt: str = "pgm") -> Path:
    root = Path(root)
    if isinstance(splits, str):
        splits = [splits] * len(images)
    ids = [im.id for im in images]
    if any(not i or i != i.strip() or "," in i for i in ids) or len(set(ids)) != len(ids):
        raise AnnotationError("image ids must be unique, nonempty, comma-free and unpadded to be written")
    for sub in ("images", "annotations"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    any_boxes = any(im.boxes is not None for im in images)
    if any_boxes:
        (root / "boxes").mkdir(exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "split"])
        for im, split in zip(images, splits):
            writer.writerow([im.id, split])
    for im in images:
        ext = fmt if im.pixels.shape[0] == 1 or fmt == "png" else "ppm"
        path = root / "images" / f"{im.id}.{ext}"
        if ext == "png":
            _write_png(path, im.pixels)
        else:
            write_raster(path, im.pixels)
        _write_rows(root / "annotations" / f"{im.id}.csv", im.dots if im.dots is not None else np.zeros((0, 2)))
        if im.boxes is not None:
            _write_rows(root / "boxes" / f"{im.id}.csv", im.boxes)
    return root


def _write_png(path, pixels: np.ndarray) -> None:
    from PIL import Image
    q = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(q[0], "L") if q.shape[0] == 1 else Image.fromarray(q.transpose(1, 2, 0), "RGB")
    img.save(path)


def _find_image(root: Path, image_id: str) -> Path | None:
    for ext in ("pgm", "ppm", "png"):
        p = root / "images" / f"{image_id}.{ext}"
        if p.exists():
            return p
    return None


def load_dataset(root) -> Dataset:
    """Read and validate a dataset directory; pixels stay on disk until requested."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise LoadError(f"{manifest}: manifest not found")
    records: list[Record] = []
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["id", "split"]:
        raise LoadError(f"{manifest}:1: expected header 'id,split'")
    seen: set[str] = set()
    for lineno, row in enumerate(rows[1:], 2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2 or not row[0].strip():
            raise LoadError(f"{manifest}:{lineno}: expected 'id,split', got {','.join(row)!r}")
        image_id, split = row[0].strip(), row[1].strip()
        if image_id in seen:
            raise LoadError(f"{manifest}:{lineno}: duplicate id {image_id!r}")
        seen.add(image_id)
        image_path = _find_image(root, image_id)
        if image_path is None:
            raise LoadError(f"{manifest}:{lineno}: no image file for id {image_id!r}")
        shape = raster_shape(image_path)
        _, h, w = shape
        ann = root / "annotations" / f"{image_id}.csv"
        if not ann.exists():
            raise LoadError(f"{ann}: annotation file missing for id {image_id!r}")
        dots = _read_rows(ann, 2)
        bad = np.nonzero((dots[:, 0] < 0) | (dots[:, 0] >= w) | (dots[:, 1] < 0) | (dots[:, 1] >= h))[0]
        if bad.size:
            raise LoadError(f"{ann}:{_data_line(ann, bad[0])}: dot {tuple(dots[bad[0]])} "
                            f"outside the {w}x{h} image")
        boxes = None
        box_path = root / "boxes" / f"{image_id}.csv"
        if box_path.exists():
            boxes = _read_rows(box_path, 4)
            if len(boxes) != len(dots):
                raise LoadError(f"{box_path}: {len(boxes)} boxes for {len(dots)} dots")
            bad = np.nonzero((boxes[:, 0] < 0) | (boxes[:, 1] < 0) | (boxes[:, 2] <= 0) | (boxes[:, 3] <= 0)
                             | (boxes[:, 0] + boxes[:, 2] > w) | (boxes[:, 1] + boxes[:, 3] > h))[0]
            if bad.size:
                raise LoadError(f"{box_path}:{_data_line(box_path, bad[0])}: box outside image bounds")
        records.append(Record(image_id, split, image_path, dots, boxes, shape))
    return Dataset(records, root)


def _data_line(path, index: int) -> int:
    """1-based line number of the ``index``-th non-blank line."""
    with open(path) as fh:
        seen = -1
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                seen += 1
                if seen == index:
                    return lineno
    return index + 1


@dataclass
class SplitStats:
    n_images: int
    total_count: int
    count_range: tuple[int, int] | None
    resolution_range: tuple[tuple[int, int], tuple[int, int]] | None


def dataset_stats(ds: Dataset, splits=SPLITS) -> dict[str, SplitStats]:
    """Image count, total objects, count range and (H, W) range per split.

    Resolutions are ordered by pixel area, ties broken by height.
    """
    out = {}
    for split in splits:
        recs = ds.records_for(split)
        if not recs:
            out[split] = SplitStats(0, 0, None, None)
            continue
        counts = [r.count for r in recs]
        res = sorted(((r.shape[1], r.shape[2]) for r in recs), key=lambda hw: (hw[0] * hw[1], hw[0]))
        out[split] = SplitStats(len(recs), int(sum(counts)), (min(counts), max(counts)), (res[0], res[-1]))
    return out


def format_stats(stats: dict[str, SplitStats]) -> str:
    """Render stats in a four-column table: images, resolution, total count, count range."""
    lines = [f"{'split':<8}{'#images':>9}  {'resolution':<24}{'total count':>12}  {'range of count':<16}"]
    for split, s in stats.items():
        if s.resolution_range is None:
            res, rng = "-", "-"
        else:
            (h0, w0), (h1, w1) = s.resolution_range
            res = f"({h0}x{w0})" if (h0, w0) == (h1, w1) else f"({h0}x{w0}) - ({h1}x{w1})"
            rng = f"[{s.count_range[0]}, {s.count_range[1]}]"
        lines.append(f"{split:<8}{s.n_images:>9}  {res:<24}{s.total_count:>12}  {rng:<16}")
    return "\n".join(lines)
