"""Dataset recipes and the patch-train / full-image-infer generalization experiment."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import DataConfig
from .evaluate import SuiteResult, evaluate_suite
from .model import CountModel, ModelConfig, build_model
from .synth import AnnotatedImage, SceneSpec, generate_image
from .train import TrainConfig, TrainLog, train

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def scaled_scene(spec: SceneSpec, height: int, width: int) -> SceneSpec:
    """Same object density at a different image size (count range scales with area)."""
    ratio = (height * width) / (spec.height * spec.width)
    return replace(spec, height=height, width=width,
                   n_min=int(round(spec.n_min * ratio)), n_max=int(round(spec.n_max * ratio)))


def generate_split(spec: SceneSpec, split: str, n: int, seed: int,
                   sizes: tuple[int, ...] = ()) -> list[AnnotatedImage]:
    """``n`` images for one split; with ``sizes`` the side length cycles through them."""
    code = SPLIT_CODES.get(split, 3)
    images = []
    for i in range(n):
        s = spec if not sizes else scaled_scene(spec, sizes[i % len(sizes)], sizes[i % len(sizes)])
        images.append(generate_image(s, [seed, code, i], f"{split}{i:04d}"))
    return images


def generate_dataset_images(spec: SceneSpec, data: DataConfig, seed: int) -> tuple[list[AnnotatedImage], list[str]]:
    images, splits = [], []
    for split, n, sizes in (("train", data.n_train, ()), ("val", data.n_val, ()),
                            ("test", data.n_test, data.test_sizes)):
        part = generate_split(spec, split, n, seed, sizes)
        images += part
        splits += [split] * len(part)
    return images, splits


@dataclass(frozen=True)
class GeneralizationSetup:
    """Desk-scale stand-in for the patch-size experiments: train on patches, test on larger images."""

    scene: SceneSpec = SceneSpec(height=192, width=192, n_min=5, n_max=25, r_min=3.0, r_max=5.0,
                                 separation=12.0, noise=0.3, renderer="disk")
    n_train: int = 64
    n_test: int = 32
    test_sizes: tuple[int, ...] = (192, 240, 288, 336, 384)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = TrainConfig(patch_size=48, patches_per_image=16, batch_size=32, epochs=40,
                                     optimizer="adam", lr=1e-3, loss="l1", seed=0)
    seed: int = 2019


@dataclass
class GeneralizationResult:
    test_images: list[AnnotatedImage]
    gsp_model: CountModel
    gap_model: CountModel
    gsp_log: TrainLog
    gap_log: TrainLog
    gsp_full: SuiteResult
    gap_full: SuiteResult
    gap_tiled: SuiteResult
    seconds: float

    def ratio_at(self, size: int, result: SuiteResult | None = None) -> float:
        """Mean predicted/true count over the test images of side ``size``."""
        result = result or self.gap_full
        idx = [i for i, im in enumerate(sorted(self.test_images, key=lambda im: im.id))
               if im.height == size and im.width == size]
        return float(np.mean(result.preds[idx] / result.gts[idx]))


def run_generalization(setup: GeneralizationSetup = GeneralizationSetup()) -> GeneralizationResult:
    start = time.perf_counter()
    train_images = generate_split(setup.scene, "train", setup.n_train, setup.seed)
    test_images = generate_split(setup.scene, "test", setup.n_test, setup.seed, setup.test_sizes)
    gsp_model, gsp_log = train(build_model(replace(setup.model, head="gsp")), train_images, setup.train)
    gap_model, gap_log = train(build_model(replace(setup.model, head="gap")), train_images, setup.train)
    patch = setup.train.patch_size
    return GeneralizationResult(
        test_images, gsp_model, gap_model, gsp_log, gap_log,
        evaluate_suite(gsp_model, test_images, "full", split=None),
        evaluate_suite(gap_model, test_images, "full", split=None),
        evaluate_suite(gap_model, test_images, "tiled", patch, setup.train.rule, split=None),
        time.perf_counter() - start)
