"""Experiment configuration files.

An INI-style file of ``key=value`` lines grouped in sections::

    [experiment]  seed, dataset, out_dir, checkpoint
    [data]        n_train, n_val, n_test, test_sizes
    [scene]       SceneSpec fields
    [model]       ModelConfig fields (blocks=out:k:stride:pad:pool,...)
    [train]       TrainConfig fields
    [eval]        mode (full|tiled), patch_size, rule, split

Command-line overrides use ``section.key=value`` and win over the file.
``seed`` in [model] and [train] defaults to the global [experiment] seed.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .synth import SceneSpec
from .train import TrainConfig

SECTIONS = ("experiment", "data", "scene", "model", "train", "eval")
OUT_DIR_ENV = "GSPCOUNT_OUT"


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 64
    n_val: int = 0
    n_test: int = 32
    test_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("image counts must be non-negative")
        if any(s < 1 for s in self.test_sizes):
            raise ConfigError(f"test sizes must be positive, got {self.test_sizes}")


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "full"
    patch_size: int | None = None
    rule: str = "dots"
    split: str = "test"

    def __post_init__(self):
        if self.mode not in ("full", "tiled", "both"):
            raise ConfigError(f"eval mode must be full, tiled or both, got {self.mode!r}")
        if self.mode != "full" and self.patch_size is None:
            raise ConfigError("tiled evaluation needs eval.patch_size")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: Path | None = None
    out_dir: Path | None = None
    checkpoint: Path | None = None
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved_out_dir(self) -> Path:
        if self.out_dir is not None:
            return self.out_dir
        return Path(os.environ.get(OUT_DIR_ENV, "out"))


def _parse_overrides(overrides) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        out.setdefault(section, {})[key.strip()] = value.strip()
    return out


def read_sections(path=None, overrides=None) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{name}]")
            sections[name].update(parser[name])
    for name, values in _parse_overrides(overrides).items():
        sections[name].update(values)
    return sections


def _int(section: str, mapping: dict[str, str], key: str, default):
    if key not in mapping:
        return default
    try:
        return int(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} must be an integer, got {mapping[key]!r}") from exc


def load_experiment(path=None, overrides=None) -> ExperimentConfig:
    s = read_sections(path, overrides)
    exp = dict(s["experiment"])
    unknown = set(exp) - {"seed", "dataset", "out_dir", "checkpoint"}
    if unknown:
        raise ConfigError(f"unknown [experiment] keys: {sorted(unknown)}")
    seed = _int("experiment", exp, "seed", 0)

    data = dict(s["data"])
    unknown = set(data) - {"n_train", "n_val", "n_test", "test_sizes"}
    if unknown:
        raise ConfigError(f"unknown [data] keys: {sorted(unknown)}")
    try:
        sizes = tuple(int(v) for v in data.get("test_sizes", "").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError("[data] test_sizes must be comma-separated integers") from exc
    data_cfg = DataConfig(_int("data", data, "n_train", 64), _int("data", data, "n_val", 0),
                          _int("data", data, "n_test", 32), sizes)

    model_map = {"seed": str(seed), **s["model"]}
    train_map = {"seed": str(seed), **s["train"]}
    ev = dict(s["eval"])
    unknown = set(ev) - {"mode", "patch_size", "rule", "split"}
    if unknown:
        raise ConfigError(f"unknown [eval] keys: {sorted(unknown)}")
    patch = ev.get("patch_size", "").strip()
    patch_size = _int("eval", ev, "patch_size", None) if patch and patch.lower() != "full" else None
    eval_cfg = EvalConfig(ev.get("mode", "full").strip(), patch_size,
                          ev.get("rule", "dots").strip(), ev.get("split", "test").strip())

    def _path(key):
        return Path(exp[key]) if exp.get(key) else None

    return ExperimentConfig(seed, _path("dataset"), _path("out_dir"), _path("checkpoint"), data_cfg,
                            SceneSpec.from_mapping(s["scene"]), ModelConfig.from_mapping(model_map),
                            TrainConfig.from_mapping(train_map), eval_cfg)
