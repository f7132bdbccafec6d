"""Counting network: conv front-end, GSP or GAP head, scalar linear output."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor

HEADS = ("gsp", "gap")

CHECKPOINT_MAGIC = "gspcount-checkpoint 1"


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool_after: bool = True

    def encode(self) -> str:
        return f"{self.out_channels}:{self.kernel}:{self.stride}:{self.padding}:{int(self.pool_after)}"

    @classmethod
    def decode(cls, text: str) -> "ConvBlock":
        parts = text.strip().split(":")
        if len(parts) != 5:
            raise ConfigError(f"conv block {text!r} must be out:kernel:stride:padding:pool")
        try:
            out, k, s, p, pool = (int(v) for v in parts)
        except ValueError as exc:
            raise ConfigError(f"conv block {text!r} has non-integer fields") from exc
        return cls(out, k, s, p, bool(pool))


def _default_blocks() -> tuple[ConvBlock, ...]:
    return tuple(ConvBlock(c) for c in (16, 32, 64, 64))


@dataclass(frozen=True)
class ModelConfig:
    """Front-end layout and head choice.

    The default is four 3x3 conv blocks (16/32/64/64 channels) each followed by
    a 2x2 max-pool, giving a 64-dimensional pooled vector and an overall
    downsampling factor of 16.
    """

    blocks: tuple[ConvBlock, ...] = field(default_factory=_default_blocks)
    head: str = "gsp"
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "head", str(self.head).lower())
        self.validate()

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("model needs at least one conv block")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be positive, got {self.in_channels}")
        for i, b in enumerate(self.blocks):
            if b.out_channels < 1 or b.kernel < 1 or b.stride < 1 or b.padding < 0:
                raise ConfigError(f"conv block {i} has invalid geometry: {b}")

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1].out_channels

    @property
    def downsampling(self) -> int:
        d = 1
        for b in self.blocks:
            d *= b.stride * (2 if b.pool_after else 1)
        return d

    def output_size(self, n: int) -> int:
        """Spatial size of the final feature map for an input side of ``n`` (0 if too small)."""
        for b in self.blocks:
            if b.kernel > n + 2 * b.padding:
                return 0
            n = (n + 2 * b.padding - b.kernel) // b.stride + 1
            if b.pool_after:
                if n < 2:
                    return 0
                n = (n - 2) // 2 + 1
        return n

    @property
    def min_input_size(self) -> int:
        """Smallest multiple of the downsampling factor that yields a non-empty feature map."""
        d = self.downsampling
        n = d
        while self.output_size(n) < 1:
            n += d
        return n

    def receptive_field(self) -> tuple[int, int, int]:
        """(size, jump, left offset) of a final feature cell's input window.

        Feature column ``p`` sees input columns ``left + p*jump`` through
        ``left + p*jump + size - 1``.
        """
        size, jump, left = 1, 1, 0
        for b in self.blocks:
            left -= b.padding * jump
            size += (b.kernel - 1) * jump
            jump *= b.stride
            if b.pool_after:
                size += jump
                jump *= 2
        return size, jump, left

    def with_head(self, head: str) -> "ModelConfig":
        return ModelConfig(self.blocks, head, self.in_channels, self.seed)

    def to_lines(self) -> list[str]:
        return [
            "blocks=" + ",".join(b.encode() for b in self.blocks),
            f"head={self.head}",
            f"in_channels={self.in_channels}",
            f"seed={self.seed}",
        ]

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "ModelConfig":
        known = {"blocks", "head", "in_channels", "seed"}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs: dict = {}
        try:
            if "blocks" in mapping:
                text = mapping["blocks"].strip()
                kwargs["blocks"] = tuple(ConvBlock.decode(t) for t in text.split(",")) if text else ()
            if "head" in mapping:
                kwargs["head"] = mapping["head"].strip()
            if "in_channels" in mapping:
                kwargs["in_channels"] = int(mapping["in_channels"])
            if "seed" in mapping:
                kwargs["seed"] = int(mapping["seed"])
        except ValueError as exc:
            raise ConfigError(f"bad model config value: {exc}") from exc
        return cls(**kwargs)


class CountModel:
    """Conv blocks (conv -> ReLU -> optional 2x2 max-pool), global pooling, linear."""

    def __init__(self, config: ModelConfig, kernels: list[Tensor], biases: list[Tensor],
                 weight: Tensor, bias: Tensor):
        self.config = config
        self.kernels = kernels
        self.biases = biases
        self.weight = weight
        self.bias = bias
        self._check_shapes()

    def _check_shapes(self) -> None:
        c_in = self.config.in_channels
        if len(self.kernels) != len(self.config.blocks) or len(self.biases) != len(self.config.blocks):
            raise ConfigError("parameter list length does not match conv blocks")
        for i, (b, k, bias) in enumerate(zip(self.config.blocks, self.kernels, self.biases)):
            if k.shape != (b.out_channels, c_in, b.kernel, b.kernel):
                raise ConfigError(f"conv{i}.weight has shape {k.shape}, expected "
                                  f"{(b.out_channels, c_in, b.kernel, b.kernel)}")
            if bias.shape != (b.out_channels,):
                raise ConfigError(f"conv{i}.bias has shape {bias.shape}")
            c_in = b.out_channels
        if self.weight.shape != (self.config.feature_dim,):
            raise ConfigError(f"linear.weight has shape {self.weight.shape}")
        if self.bias.shape != ():
            raise ConfigError(f"linear.bias must be scalar, got {self.bias.shape}")

    @property
    def head(self) -> str:
        return self.config.head

    @property
    def min_input_size(self) -> int:
        return self.config.min_input_size

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out.append((f"conv{i}.weight", k))
            out.append((f"conv{i}.bias", b))
        out.append(("linear.weight", self.weight))
        out.append(("linear.bias", self.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def with_head(self, head: str) -> "CountModel":
        """A model sharing this model's parameter tensors but using another head."""
        return CountModel(self.config.with_head(head), self.kernels, self.biases, self.weight, self.bias)

    def copy(self) -> "CountModel":
        return CountModel(self.config, [Tensor(k.data.copy()) for k in self.kernels],
                          [Tensor(b.data.copy()) for b in self.biases],
                          Tensor(self.weight.data.copy()), Tensor(self.bias.data.copy()))

    def features(self, image: Tensor | np.ndarray) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(image, requires_grad=False)
        if x.data.ndim not in (3, 4):
            raise DimensionError(f"image must be [C,H,W] or [N,C,H,W], got {x.shape}")
        h, w = x.shape[-2:]
        m = self.min_input_size
        if h < m or w < m:
            raise DimensionError(f"input {h}x{w} is smaller than the model minimum {m}x{m}")
        for block, k, b in zip(self.config.blocks, self.kernels, self.biases):
            x = T.relu(T.conv2d(x, k, b, block.stride, block.padding))
            if block.pool_after:
                x = T.maxpool2d(x, 2, 2)
        return x

    def forward(self, image: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
        """Return ``(count, feature_map)``; batched input gives a vector of counts."""
        fmap = self.features(image)
        pooled = T.gsp(fmap) if self.head == "gsp" else T.gap(fmap)
        return T.linear(pooled, self.weight, self.bias), fmap

    __call__ = forward


def build_model(config: ModelConfig) -> CountModel:
    """He-normal conv kernels, zero conv biases, small positive linear weights, zero bias."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    kernels, biases = [], []
    c_in = config.in_channels
    for b in config.blocks:
        fan_in = c_in * b.kernel * b.kernel
        kernels.append(Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                         (b.out_channels, c_in, b.kernel, b.kernel))))
        biases.append(Tensor(np.zeros(b.out_channels)))
        c_in = b.out_channels
    weight = Tensor(np.abs(rng.normal(0.0, 0.01, config.feature_dim)))
    return CountModel(config, kernels, biases, weight, Tensor(0.0))


# ---------------------------------------------------------------------------
# idealized analytic model


@dataclass
class IdealizedBlockModel:
    """Analytic stand-in for a trained front-end.

    Its single feature channel is the input scaled by ``count / block**2``, so a
    uniform (all-ones) ``block x block`` region carries exactly ``count`` units
    of feature mass. The linear layer is calibrated on one block: weight 1 for
    GSP, ``block**2`` for GAP, so both heads predict ``count`` on that block.
    """

    block: int
    count: float
    head: str = "gsp"

    def __post_init__(self):
        self.head = self.head.lower()
        if self.block < 1:
            raise ConfigError(f"block size must be >= 1, got {self.block}")
        if self.count < 0:
            raise ConfigError(f"per-block count must be >= 0, got {self.count}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")

    @property
    def density(self) -> float:
        return self.count / (self.block * self.block)

    @property
    def min_input_size(self) -> int:
        return 1

    @property
    def weight(self) -> Tensor:
        return Tensor([1.0 if self.head == "gsp" else float(self.block * self.block)])

    @property
    def bias(self) -> Tensor:
        return Tensor(0.0)

    def with_head(self, head: str) -> "IdealizedBlockModel":
        return IdealizedBlockModel(self.block, self.count, head)

    def forward(self, image: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
        x = image if isinstance(image, Tensor) else Tensor(image, requires_grad=False)
        c = x.shape[-3]
        kernel = Tensor(np.full((1, c, 1, 1), self.density / c), requires_grad=False)
        fmap = T.conv2d(x, kernel, Tensor([0.0], requires_grad=False))
        pooled = T.gsp(fmap) if self.head == "gsp" else T.gap(fmap)
        return T.linear(pooled, self.weight, self.bias), fmap

    __call__ = forward


def build_idealized(block: int, count: float, head: str = "gsp") -> IdealizedBlockModel:
    return IdealizedBlockModel(block, count, head)


def idealized_scaling_check(model: IdealizedBlockModel, m: int) -> tuple[float, float]:
    """Evaluate both heads on a uniform ``m*block`` square; returns (gsp, gap) predictions."""
    if m < 1:
        raise ConfigError(f"scale factor m must be >= 1, got {m}")
    side = m * model.block
    image = np.ones((1, side, side))
    gsp_pred = model.with_head("gsp").forward(image)[0].item()
    gap_pred = model.with_head("gap").forward(image)[0].item()
    return gsp_pred, gap_pred


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: CountModel, path) -> None:
    """Text checkpoint: magic line, ``[config]`` key=value lines, then tensor sections."""
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n[config]\n")
        for line in model.config.to_lines():
            fh.write(line + "\n")
        for name, p in model.named_parameters():
            fh.write(f"[tensor {name}]\n")
            T.write_tensor(fh, p)


def _config_lines(it: Iterator[str], path) -> tuple[dict[str, str], str | None]:
    mapping: dict[str, str] = {}
    for line in it:
        if line.startswith("[tensor "):
            return mapping, line
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path}: config line {line!r} is not key=value")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping, None


def load_model(path) -> CountModel:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from exc
    it = iter(text.splitlines())
    if next(it, None) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: missing checkpoint header {CHECKPOINT_MAGIC!r}")
    if next(it, None) != "[config]":
        raise FormatError(f"{path}: missing [config] section")
    mapping, section = _config_lines(it, path)
    try:
        config = ModelConfig.from_mapping(mapping)
    except ConfigError as exc:
        raise FormatError(f"{path}: config: {exc}") from exc
    tensors: dict[str, Tensor] = {}
    while section is not None:
        name = section[len("[tensor "):].rstrip("]").strip()
        tensors[name] = T.read_tensor(it, name=name)
        section = next(it, None)
        while section is not None and not section.strip():
            section = next(it, None)
        if section is not None and not section.startswith("[tensor "):
            raise FormatError(f"{path}: {name}: unexpected trailing line {section!r}")
    n = len(config.blocks)
    expected = [f"conv{i}.{kind}" for i in range(n) for kind in ("weight", "bias")]
    expected += ["linear.weight", "linear.bias"]
    for name in expected:
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name}")
    extra = set(tensors) - set(expected)
    if extra:
        raise FormatError(f"{path}: unexpected tensors {sorted(extra)}")
    try:
        return CountModel(config, [tensors[f"conv{i}.weight"] for i in range(n)],
                          [tensors[f"conv{i}.bias"] for i in range(n)],
                          tensors["linear.weight"], tensors["linear.bias"])
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from exc
