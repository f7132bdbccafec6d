"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of operations a conv -> pool -> linear counting network
needs are provided. Spatial operations accept a single ``[C, H, W]`` map or
a batch ``[N, C, H, W]``; the pooled heads then return ``[C]`` or ``[N, C]``.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence, TextIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, FormatError, NumericError

__all__ = [
    "Tensor",
    "conv2d",
    "relu",
    "maxpool2d",
    "gsp",
    "gap",
    "linear",
    "loss",
    "add",
    "mul",
    "tensor_sum",
    "backward",
    "gradient_check",
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
]


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")
    return arr


class Tensor:
    """A node in a dynamically built computation graph.

    ``data`` holds the values (row-major float64). ``grad`` is allocated the
    first time a backward pass reaches this tensor. Tensors created directly
    are leaves; tensors returned by an operation remember their parents and
    a closure mapping the output gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = True):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: tuple["Tensor", ...],
                grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _check_finite(np.asarray(data, dtype=np.float64), op)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        if out.requires_grad:
            out._parents = parents
            out._backward = grad_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self, seed: float = 1.0, retain_graph: bool = False) -> None:
        backward(self, seed=seed, retain_graph=retain_graph)

    def __repr__(self) -> str:
        kind = "leaf" if self.is_leaf else self.op
        return f"Tensor(shape={self.shape}, {kind})"


# ---------------------------------------------------------------------------
# operations


def _as_batch(x: Tensor, name: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], False
    if x.data.ndim == 4:
        return x.data, True
    raise DimensionError(f"{name} expects [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation."""
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} or padding={padding}")
    xb, batched = _as_batch(x, "conv2d")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be [C_out,C_in,k,k], got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if xb.shape[1] != c_in:
        raise DimensionError(f"input channels {x.shape} do not match kernel {kernel.shape}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match kernel {kernel.shape}")
    n, _, h, w = xb.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(
            f"kernel {k}x{k} larger than padded input {h + 2 * padding}x{w + 2 * padding} "
            f"(input {x.shape})")
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    # cols: [N, C_in, H', W', k, k]
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # [N, H', W', C_out]
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def grad_fn(g: np.ndarray):
        gb = g if batched else g[None]
        gx = gk = gbias = None
        if x.requires_grad:
            dcols = np.tensordot(gb, kernel.data, axes=([1], [0]))  # [N, H', W', C_in, k, k]
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            gx = dx if batched else dx[0]
        if kernel.requires_grad:
            gk = np.tensordot(gb, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias.requires_grad:
            gbias = gb.sum(axis=(0, 2, 3))
        return gx, gk, gbias

    return Tensor._result(out if batched else out[0], "conv2d", (x, kernel, bias), grad_fn)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Windowed maximum. Gradient goes to the first maximum in row-major order."""
    stride = k if stride is None else stride
    xb, batched = _as_batch(x, "maxpool2d")
    n, c, h, w = xb.shape
    if k < 1 or stride < 1:
        raise DimensionError(f"invalid pool k={k}, stride={stride}")
    if k > h or k > w:
        raise DimensionError(f"pool window {k}x{k} larger than input {x.shape}")
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    win = sliding_window_view(xb, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    flat = win.reshape(n, c, h_out, w_out, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g: np.ndarray):
        gb = g if batched else g[None]
        dx = np.zeros_like(xb)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                if hit.any():
                    dx[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += gb * hit
        return (dx if batched else dx[0],)

    return Tensor._result(out if batched else out[0], "maxpool2d", (x,), grad_fn)


def _pool_input(x: Tensor, name: str) -> np.ndarray:
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"{name} expects a rank-3 [C,H,W] map (or batch), got shape {x.shape}")
    return x.data


def gsp(x: Tensor) -> Tensor:
    """Global sum pooling: sum each channel over all spatial positions."""
    data = _pool_input(x, "gsp")
    hw = data.shape[-2:]

    def grad_fn(g: np.ndarray):
        return (np.broadcast_to(g[..., None, None], g.shape + hw).copy(),)

    return Tensor._result(data.sum(axis=(-2, -1)), "gsp", (x,), grad_fn)


def gap(x: Tensor) -> Tensor:
    """Global average pooling: channelwise spatial mean."""
    data = _pool_input(x, "gap")
    hw = data.shape[-2:]
    area = hw[0] * hw[1]

    def grad_fn(g: np.ndarray):
        return (np.broadcast_to(g[..., None, None] / area, g.shape + hw).copy(),)

    return Tensor._result(data.sum(axis=(-2, -1)) / area, "gap", (x,), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x of shape [C] (scalar out) or [N, C] ([N] out)."""
    if weight.data.ndim != 1 or x.data.ndim not in (1, 2) or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.data.size != 1:
        raise DimensionError(f"linear: bias must be a scalar, got shape {bias.shape}")
    b = bias.data.reshape(())
    out = x.data @ weight.data + b

    def grad_fn(g: np.ndarray):
        gx = np.multiply.outer(g, weight.data) if x.requires_grad else None
        gw = (g[..., None] * x.data).reshape(-1, weight.shape[0]).sum(axis=0) if weight.requires_grad else None
        gb = np.reshape(g.sum(), bias.shape) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._result(out, "linear", (x, weight, bias), grad_fn)


def loss(pred: Tensor, target, kind: str = "l1") -> Tensor:
    """Mean L1 or squared error between predictions and targets."""
    kind = kind.lower()
    if kind not in ("l1", "mse"):
        raise ContractError(f"unknown loss kind {kind!r}")
    tgt = np.broadcast_to(np.asarray(target, dtype=np.float64), pred.shape)
    _check_finite(tgt, "loss target")
    diff = pred.data - tgt
    count = max(diff.size, 1)
    if kind == "l1":
        value = np.abs(diff).sum() / count
        grad = np.sign(diff) / count
    else:
        value = (diff * diff).sum() / count
        grad = 2.0 * diff / count
    return Tensor._result(np.asarray(value), kind, (pred,), lambda g: (g * grad,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor._result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return Tensor._result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._result(np.asarray(x.data.sum()), "sum", (x,),
                          lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: float = 1.0, retain_graph: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``seed`` scales the root gradient. Unless ``retain_graph`` is set, the
    graph links are dropped afterwards so intermediate buffers can be freed.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.full(root.shape, float(seed))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            _check_finite(g, "backward")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None


# ---------------------------------------------------------------------------
# finite-difference verification


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, epsilon: float = 1e-5,
                   indices: Iterable[int] | None = None) -> float:
    """Max relative error between backprop gradients and central differences.

    The error per element is ``|a - n| / max(1, |a|, |n|)``. ``indices``
    restricts the comparison to a subset of flat positions, which keeps the
    check affordable for large parameter tensors.
    """
    if not 0 < epsilon <= 1e-3:
        raise ContractError(f"epsilon must lie in (0, 1e-3], got {epsilon}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy())
    out = f(leaf)
    if out.data.size != 1:
        raise ContractError(f"gradient_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros(base.size) if leaf.grad is None else leaf.grad.reshape(-1)

    def evaluate(arr: np.ndarray) -> float:
        value = f(Tensor(arr, requires_grad=False)).item()
        if not np.isfinite(value):
            raise NumericError("gradient_check: function returned a non-finite value")
        return value

    positions = range(base.size) if indices is None else indices
    worst = 0.0
    flat = base.reshape(-1)
    for i in positions:
        plus = flat.copy()
        plus[i] += epsilon
        minus = flat.copy()
        minus[i] -= epsilon
        numeric = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2 * epsilon)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# serialization
#
# A tensor is written as a header line ``shape: d1 d2 ...`` followed by one
# value per line in row-major order. Values use repr() so reloading is exact.


def write_tensor(fh: TextIO, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    fh.write("shape:" + "".join(f" {d}" for d in arr.shape) + "\n")
    for v in arr.reshape(-1):
        fh.write(repr(float(v)) + "\n")


def read_tensor(lines: Iterable[str], name: str = "tensor") -> Tensor:
    """Read one tensor from an iterator of lines (consumes exactly its lines)."""
    it = iter(lines)
    header = next(it, None)
    if header is None or not header.startswith("shape:"):
        raise FormatError(f"{name}: expected 'shape:' header, got {header!r}")
    try:
        shape = tuple(int(tok) for tok in header[len("shape:"):].split())
    except ValueError as exc:
        raise FormatError(f"{name}: bad shape header {header!r}") from exc
    if any(d < 1 for d in shape):
        raise FormatError(f"{name}: dimensions must be positive, got {shape}")
    size = int(np.prod(shape)) if shape else 1
    values = np.empty(size)
    for i in range(size):
        line = next(it, None)
        if line is None or not line.strip():
            raise FormatError(f"{name}: truncated, expected {size} values, found {i}")
        try:
            values[i] = float(line)
        except ValueError as exc:
            raise FormatError(f"{name}: bad value {line.strip()!r} at index {i}") from exc
    if not np.isfinite(values).all():
        raise FormatError(f"{name}: non-finite values")
    return Tensor(values.reshape(shape))


def save_tensor(t: Tensor, path) -> None:
    with open(path, "w") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path) as fh:
        lines = fh.read().splitlines()
    t = read_tensor(lines, name=str(path))
    return t
