"""Patch-based training loop and optimizers."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .dataset import Dataset
from .errors import ConfigError, NumericError, TrainingError
from .evaluate import evaluate_suite
from .synth import (RULES, AnnotatedImage, PatchSample, count_in_rect, sample_object_centered_patch,
                    sample_random_patch)

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    """Training protocol. ``patch_size=None`` trains on full images."""

    patch_size: int | None = 48
    patches_per_image: int = 8
    batch_size: int = 16
    epochs: int = 10
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: str = "l1"
    rule: str = "dots"
    seed: int = 0
    object_centered: float = 0.0
    freeze_convs: bool = False
    train_split: str = "train"
    val_split: str = "val"
    debug: bool = False

    def __post_init__(self):
        if self.patch_size is not None and self.patch_size < 1:
            raise ConfigError(f"patch_size must be positive or full, got {self.patch_size}")
        if self.epochs < 0 or self.batch_size < 1 or self.patches_per_image < 1:
            raise ConfigError("epochs must be >= 0; batch_size and patches_per_image >= 1")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss not in ("l1", "mse"):
            raise ConfigError(f"loss must be 'l1' or 'mse', got {self.loss!r}")
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}, got {self.rule!r}")
        if not 0.0 <= self.object_centered <= 1.0:
            raise ConfigError(f"object_centered ratio must lie in [0,1], got {self.object_centered}")

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(mapping) - set(kinds)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in mapping.items():
            raw = raw.strip()
            kind = kinds[key]
            try:
                if key == "patch_size":
                    kwargs[key] = None if raw.lower() in ("full", "none", "") else int(raw)
                elif kind == "int":
                    kwargs[key] = int(raw)
                elif kind == "float":
                    kwargs[key] = float(raw)
                elif kind == "bool":
                    if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                        raise ValueError(raw)
                    kwargs[key] = raw.lower() in ("1", "true", "yes")
                else:
                    kwargs[key] = raw.lower() if key in ("optimizer", "loss", "rule") else raw
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={'full' if f.name == 'patch_size' and v is None else v}")
        return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_mae: float | None
    seconds: float
    seed: tuple[int, int]


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def write_csv(self, path, include_time: bool = True) -> None:
        """``epoch,loss,val_mae[,seconds]``. Without the wall-clock column the file is reproducible."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss", "val_mae"] + (["seconds"] if include_time else []))
            for e in self.epochs:
                row = [e.epoch, repr(e.loss), "" if e.val_mae is None else repr(e.val_mae)]
                if include_time:
                    row.append(f"{e.seconds:.3f}")
                writer.writerow(row)


# ---------------------------------------------------------------------------
# optimizers


def optimizer_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict, cfg: TrainConfig):
    """In-place update. SGD: ``v = mu*v - lr*g; p += v``. Adam with bias correction."""
    if len(params) != len(grads):
        raise ConfigError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient passed to the optimizer")
    if cfg.optimizer == "sgd":
        vel = state.setdefault("velocity", [np.zeros_like(p) for p in params])
        for p, g, v in zip(params, grads, vel):
            v *= cfg.momentum
            v -= cfg.lr * g
            p += v
    else:
        m = state.setdefault("m", [np.zeros_like(p) for p in params])
        v = state.setdefault("v", [np.zeros_like(p) for p in params])
        state["t"] = t = state.get("t", 0) + 1
        c1 = 1.0 - cfg.beta1 ** t
        c2 = 1.0 - cfg.beta2 ** t
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= cfg.beta1
            mi += (1.0 - cfg.beta1) * g
            vi *= cfg.beta2
            vi += (1.0 - cfg.beta2) * g * g
            p -= cfg.lr * (mi / c1) / (np.sqrt(vi / c2) + cfg.adam_eps)
    return params, state


# ---------------------------------------------------------------------------
# training loop


def epoch_samples(images: list[AnnotatedImage], cfg: TrainConfig, rng: np.random.Generator) -> list[PatchSample]:
    """Patches for one epoch, in image order before shuffling."""
    samples: list[PatchSample] = []
    for im in images:
        if cfg.patch_size is None:
            rect = (0, 0, im.width, im.height)
            samples.append(PatchSample(im.pixels, count_in_rect(im, rect, cfg.rule), im.id, rect))
            continue
        if cfg.patch_size > min(im.height, im.width):
            continue
        for _ in range(cfg.patches_per_image):
            centered = cfg.object_centered > 0 and rng.random() < cfg.object_centered
            if centered and im.dots is not None and len(im.dots):
                samples.append(sample_object_centered_patch(im, cfg.patch_size, cfg.rule, rng))
            else:
                samples.append(sample_random_patch(im, cfg.patch_size, cfg.rule, rng))
    return samples


def _batch_loss(model, batch: list[PatchSample], cfg: TrainConfig) -> float:
    """Forward/backward one batch; grads are those of the mean per-sample loss."""
    groups: dict[tuple, list[PatchSample]] = {}
    for s in batch:
        groups.setdefault(s.pixels.shape, []).append(s)
    total = 0.0
    for shape in sorted(groups):
        items = groups[shape]
        x = T.Tensor(np.stack([s.pixels for s in items]), requires_grad=False)
        target = np.array([s.count for s in items], dtype=np.float64)
        count, _ = model.forward(x)
        value = T.loss(count, target, cfg.loss)
        weight = len(items) / len(batch)
        value.backward(seed=weight)
        total += weight * value.item()
    return total


def validate(model, images: list[AnnotatedImage], cfg: TrainConfig) -> float:
    """Full-image MAE for GSP models, tiled cumulative MAE for GAP models."""
    if model.head == "gsp" or cfg.patch_size is None:
        return evaluate_suite(model, images, "full", split=None).metrics.mae
    return evaluate_suite(model, images, "tiled", cfg.patch_size, cfg.rule, split=None).metrics.mae


def train(model, ds: Dataset | list[AnnotatedImage], cfg: TrainConfig):
    """Train ``model`` in place; returns ``(model, TrainLog)``.

    Each epoch draws fresh patches from an rng seeded by ``(cfg.seed, epoch)``,
    so runs are reproducible and any epoch can be replayed in isolation.
    """
    if isinstance(ds, Dataset):
        train_images = ds.images(cfg.train_split)
        val_images = ds.images(cfg.val_split)
    else:
        train_images, val_images = list(ds), []
    train_images = sorted(train_images, key=lambda im: im.id)
    train_log = TrainLog()
    if cfg.epochs == 0:
        return model, train_log
    if cfg.patch_size is not None:
        usable = [im for im in train_images if cfg.patch_size <= min(im.height, im.width)]
        skipped = len(train_images) - len(usable)
        if skipped:
            log.warning("skipping %d images smaller than patch size %d", skipped, cfg.patch_size)
        if not usable:
            raise TrainingError(f"no training image is at least {cfg.patch_size}x{cfg.patch_size}")
        if cfg.patch_size < model.min_input_size:
            raise ConfigError(f"patch size {cfg.patch_size} is below the model minimum {model.min_input_size}")
    elif not train_images:
        raise TrainingError("training split is empty")

    params = model.parameters()
    if cfg.freeze_convs:
        params = [model.weight, model.bias]
    state: dict = {}
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        seed = (cfg.seed, epoch)
        rng = np.random.default_rng(seed)
        samples = epoch_samples(train_images, cfg, rng)
        order = rng.permutation(len(samples))
        losses = []
        for b, lo in enumerate(range(0, len(samples), cfg.batch_size)):
            batch = [samples[i] for i in order[lo:lo + cfg.batch_size]]
            if cfg.debug:
                by_id = {im.id: im for im in train_images}
                for s in batch:
                    assert s.count == count_in_rect(by_id[s.source_id], s.rect, cfg.rule), s.rect
            model.zero_grad()
            try:
                value = _batch_loss(model, batch, cfg)
                if not math.isfinite(value):
                    raise NumericError("loss is not finite")
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                optimizer_step([p.data for p in params], grads, state, cfg)
            except NumericError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}, batch {b + 1}: {exc}") from exc
            losses.append(value)
        model.zero_grad()
        mean_loss = math.fsum(losses) / len(losses)
        val_mae = validate(model, val_images, cfg) if val_images else None
        train_log.epochs.append(EpochRecord(epoch, mean_loss, val_mae, time.perf_counter() - start, seed))
        log.info("epoch %d loss %.4f val_mae %s", epoch, mean_loss, val_mae)
    return model, train_log
