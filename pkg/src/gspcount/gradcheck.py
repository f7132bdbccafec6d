"""Finite-difference verification of every differentiable operation and the full model loss.

Inputs are re-sampled until no ReLU pre-activation, max-pool runner-up gap or
L1 residual lies within ``10 * epsilon`` of its kink, so central differences
never straddle a non-differentiable point.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import tensor as T
from .model import ConvBlock, CountModel, ModelConfig, build_model
from .tensor import Tensor, gradient_check

MAX_TRIES = 200


def kink_margin(model: CountModel, image: np.ndarray) -> float:
    """Smallest distance of any ReLU input from 0 or any pooled max from its window runner-up."""
    x = Tensor(image, requires_grad=False)
    margin = np.inf
    for block, k, b in zip(model.config.blocks, model.kernels, model.biases):
        pre = T.conv2d(x, k, b, block.stride, block.padding)
        margin = min(margin, float(np.abs(pre.data).min()))
        x = T.relu(pre)
        if block.pool_after:
            margin = min(margin, pool_margin(x.data, 2, 2))
            x = T.maxpool2d(x, 2, 2)
    return margin


def pool_margin(data: np.ndarray, k: int, stride: int) -> float:
    """Smallest gap between the two largest values of any window that has a nonzero max.

    Windows entirely at zero (after ReLU) are skipped: their gradient is zero
    on both sides of any perturbation that keeps the pre-activations negative.
    """
    win = np.lib.stride_tricks.sliding_window_view(data, (k, k), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    flat = np.sort(win.reshape(*win.shape[:-2], k * k), axis=-1)
    gaps = flat[..., -1] - flat[..., -2]
    live = flat[..., -1] > 0
    return float(gaps[live].min()) if live.any() else np.inf


def _sample(rng: np.random.Generator, shape, ok) -> np.ndarray:
    for _ in range(MAX_TRIES):
        x = rng.normal(size=shape)
        if ok(x):
            return x
    raise RuntimeError(f"could not draw a kink-free sample of shape {shape}")


def model_loss(model: CountModel, target: float, kind: str):
    def f(image: Tensor) -> Tensor:
        count, _ = model.forward(image)
        return T.loss(count, target, kind)
    return f


def _swap(model: CountModel, name: str, value: Tensor) -> CountModel:
    kernels, biases = list(model.kernels), list(model.biases)
    weight, bias = model.weight, model.bias
    kind, attr = name.split(".")
    if kind == "linear":
        weight, bias = (value, bias) if attr == "weight" else (weight, value)
    else:
        i = int(kind[len("conv"):])
        if attr == "weight":
            kernels[i] = value
        else:
            biases[i] = value
    return CountModel(model.config, kernels, biases, weight, bias)


def op_checks(epsilon: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Max relative gradient error of each primitive, w.r.t. each differentiable argument."""
    rng = np.random.default_rng(seed)
    margin = 10 * epsilon
    x = rng.normal(size=(2, 7, 6))
    kern = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    w = rng.normal(size=5)
    v = rng.normal(size=5)
    fmap = rng.normal(size=(5, 4, 3))
    out: dict[str, float] = {}
    r = lambda a: Tensor(a, requires_grad=False)  # noqa: E731
    # weighted sums keep the upstream gradient non-trivial
    proj = rng.normal(size=(3, 4, 3))

    def conv_out(t):
        return T.tensor_sum(T.mul(t, r(proj)))

    out["conv2d/input"] = gradient_check(lambda t: conv_out(T.conv2d(t, r(kern), r(bias), 2, 1)), x, epsilon)
    out["conv2d/kernel"] = gradient_check(lambda t: conv_out(T.conv2d(r(x), t, r(bias), 2, 1)), kern, epsilon)
    out["conv2d/bias"] = gradient_check(lambda t: conv_out(T.conv2d(r(x), r(kern), t, 2, 1)), bias, epsilon)
    xr = _sample(rng, (3, 4, 4), lambda a: np.abs(a).min() > margin)
    up = rng.normal(size=xr.shape)
    out["relu"] = gradient_check(lambda t: T.tensor_sum(T.mul(T.relu(t), r(up))), xr, epsilon)
    xp = _sample(rng, (2, 6, 6), lambda a: pool_margin(a, 2, 2) > 2 * margin)
    up = rng.normal(size=(2, 3, 3))
    out["maxpool2d"] = gradient_check(lambda t: T.tensor_sum(T.mul(T.maxpool2d(t, 2, 2), r(up))), xp, epsilon)
    out["gsp"] = gradient_check(lambda t: T.linear(T.gsp(t), r(w), r(0.3)), fmap, epsilon)
    out["gap"] = gradient_check(lambda t: T.linear(T.gap(t), r(w), r(0.3)), fmap, epsilon)
    out["linear/input"] = gradient_check(lambda t: T.linear(t, r(w), r(0.5)), v, epsilon)
    out["linear/weight"] = gradient_check(lambda t: T.linear(r(v), t, r(0.5)), w, epsilon)
    out["linear/bias"] = gradient_check(lambda t: T.linear(r(v), r(w), t), np.array(0.5), epsilon)
    out["loss/l1"] = gradient_check(lambda t: T.loss(T.linear(t, r(w), r(0.0)), 1e3, "l1"), v, epsilon)
    out["loss/mse"] = gradient_check(lambda t: T.loss(T.linear(t, r(w), r(0.0)), 2.0, "mse"), v, epsilon)
    out["sum"] = gradient_check(T.tensor_sum, fmap, epsilon)
    # shared subexpression: y = a*a + a, gradient 2a + 1 sums over both paths
    out["shared"] = gradient_check(lambda t: T.tensor_sum(T.add(T.mul(t, t), t)), v, epsilon)
    return out


def model_checks(config: ModelConfig, epsilon: float = 1e-5, seed: int = 0, size: int = 16,
                 loss_kind: str = "l1", param_samples: int = 24) -> dict[str, float]:
    """Gradient errors of the model loss w.r.t. the input image and sampled entries of every parameter."""
    rng = np.random.default_rng(seed)
    model = build_model(config)
    # init-scale linear weights (std 0.01) would bury the loss gradient in rounding noise
    model.weight.data[:] = rng.normal(0.0, 0.1, model.weight.shape)
    margin = 10 * epsilon
    shape = (config.in_channels, size, size)
    image = _sample(rng, shape, lambda a: kink_margin(model, a) > margin)
    pred = model.forward(image)[0].item()
    target = pred + 1.0
    out = {"model/input": gradient_check(model_loss(model, target, loss_kind), image, epsilon)}
    for name, p in model.named_parameters():
        def f(t: Tensor, name=name) -> Tensor:
            count, _ = _swap(model, name, t).forward(Tensor(image, requires_grad=False))
            return T.loss(count, target, loss_kind)
        n = p.data.size
        idx = rng.choice(n, size=min(n, param_samples), replace=False)
        out[f"model/{name}"] = gradient_check(f, p.data, epsilon, indices=sorted(int(i) for i in idx))
    return out


def three_block_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(blocks=(ConvBlock(8), ConvBlock(8), ConvBlock(8, pool_after=False)), seed=seed)


def run_gradient_suite(config: ModelConfig | None = None, epsilon: float = 1e-5, seed: int = 0) -> dict[str, float]:
    config = config or ModelConfig(seed=seed)
    results = op_checks(epsilon, seed)
    for name, err in model_checks(config, epsilon, seed, size=16).items():
        results[f"{config.head}16/{name}"] = err
    # 32x32 gives a 2x2 feature map, where the two heads actually differ
    for head in ("gsp", "gap"):
        for name, err in model_checks(replace(config, head=head), epsilon, seed, size=32).items():
            results[f"{head}32/{name}"] = err
    for name, err in model_checks(three_block_config(seed), epsilon, seed).items():
        results[f"3block/{name}"] = err
    return results
