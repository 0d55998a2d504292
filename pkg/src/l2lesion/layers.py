"""Convolution, pooling, dense and residual layers plus the training losses.

All spatial ops take ``[C, H, W]`` or a batch ``[N, C, H, W]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import LabelOutOfRange, NonFiniteInput, ShapeMismatch, WindowLargerThanInput
from .tensor import Tensor, add, record, relu, scale

# ------------------------------------------------------------------ conv


@dataclass
class ConvLayer:
    weights: Tensor  # [C_out, C_in, k, k]
    bias: Tensor  # [C_out]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeMismatch(f"conv weights must be [C_out, C_in, k, k], got {list(self.weights.shape)}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch("conv bias must have C_out entries")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int, rng: np.random.Generator,
             stride: int = 1, padding: int | None = None) -> "ConvLayer":
        """Kaiming fan-in normal weights, zero bias; padding defaults to ``k // 2``."""
        std = math.sqrt(2.0 / (c_in * k * k))
        w = rng.normal(0.0, std, size=(c_out, c_in, k, k))
        return cls(Tensor(w, True), Tensor(np.zeros(c_out), True), stride,
                   k // 2 if padding is None else padding)

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def params(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(input: Tensor, layer: ConvLayer) -> Tensor:
    """Cross-correlation plus bias."""
    x = input.data
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    w, b = layer.weights.data, layer.bias.data
    N, C, H, W = x.shape
    O, Ci, k, _ = w.shape
    if C != Ci:
        raise ShapeMismatch(f"input has {C} channels, layer expects {Ci}")
    s, p = layer.stride, layer.padding
    Ho, Wo = conv_output_size(H, k, s, p), conv_output_size(W, k, s, p)
    if Ho < 1 or Wo < 1:
        raise WindowLargerThanInput(f"kernel {k} does not fit input {H}x{W} with padding {p}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    # channel-major im2col: rows (c, i, j), columns (n, y, x)
    xc = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, k, k, N, Ho, Wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xc[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]
    cols = cols.reshape(C * k * k, N * Ho * Wo)
    wmat = w.reshape(O, -1)
    out = (wmat @ cols).reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3) + b[None, :, None, None]
    if not batched:
        out = out[0]

    def backward(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(1, 0, 2, 3).reshape(O, N * Ho * Wo)
        gw = (gmat @ cols.T).reshape(w.shape)
        gb = g4.sum(axis=(0, 2, 3))
        gcols = (wmat.T @ gmat).reshape(C, k, k, N, Ho, Wo)
        gxp = np.zeros((C, N) + xp.shape[2:])
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += gcols[:, i, j]
        gx = gxp.transpose(1, 0, 2, 3)
        gx = np.ascontiguousarray(gx[:, :, p:p + H, p:p + W] if p else gx)
        return (gx if batched else gx[0], gw, gb)

    return record(np.ascontiguousarray(out), (input, layer.weights, layer.bias), backward)


# ------------------------------------------------------------- max pool


def max_pool(input: Tensor, filter_size: int = 2, stride: int = 2) -> Tensor:
    """Windowed max; the gradient goes to the first maximal element of each window."""
    x = input.data
    if x.ndim < 2:
        raise ShapeMismatch("pooling input needs at least 2 spatial dims")
    H, W = x.shape[-2:]
    f, s = filter_size, stride
    if H < f or W < f:
        raise WindowLargerThanInput(f"window {f}x{f} larger than input {H}x{W}")
    planes = np.ascontiguousarray(x.reshape(-1, H, W))
    out, idx = kernels.backend.max_pool_fwd(planes, f, f, s, s)
    out = np.asarray(out)
    idx = np.asarray(idx)

    def backward(g):
        gp = np.ascontiguousarray(g.reshape(out.shape))
        return (np.asarray(kernels.backend.max_pool_bwd(idx, gp, H, W)).reshape(x.shape),)

    return record(out.reshape(x.shape[:-2] + out.shape[1:]), (input,), backward)


def global_max_pool(input: Tensor) -> Tensor:
    """Per-channel max over the whole plane: ``[..., H, W] -> [...]``."""
    H, W = input.shape[-2:]
    x = input.data
    planes = np.ascontiguousarray(x.reshape(-1, H, W))
    vals, idx = kernels.backend.max_pool_fwd(planes, H, W, 1, 1)
    vals, idx = np.asarray(vals), np.asarray(idx)

    def backward(g):
        gp = np.ascontiguousarray(g.reshape(vals.shape))
        return (np.asarray(kernels.backend.max_pool_bwd(idx, gp, H, W)).reshape(x.shape),)

    return record(vals.reshape(x.shape[:-2]), (input,), backward)


# ---------------------------------------------------------------- dense


@dataclass
class DenseLayer:
    weights: Tensor  # [D_in, D_out]
    bias: Tensor  # [D_out]

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, gain: float = 2.0) -> "DenseLayer":
        w = rng.normal(0.0, math.sqrt(gain / d_in), size=(d_in, d_out))
        return cls(Tensor(w, True), Tensor(np.zeros(d_out), True))

    def params(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self)


def dense(input: Tensor, layer: DenseLayer) -> Tensor:
    """Inner-product layer on ``[N, D_in]``."""
    x, w, b = input.data, layer.weights.data, layer.bias.data
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"dense input {list(x.shape)} incompatible with weights {list(w.shape)}")
    return record(x @ w + b, (input, layer.weights, layer.bias),
                  lambda g: (g @ w.T, x.T @ g, g.sum(axis=0)))


# ------------------------------------------------------------- residual

RESIDUAL_VARIANTS = {"vanilla": 2, "dense": 3}


@dataclass
class ResidualBlock:
    """``F(x) + x`` where ``F`` is convs separated by relus (none after the last).

    ``vanilla`` has two convs in the body, ``dense`` three.
    """

    body: list = field(default_factory=list)
    variant: str = "vanilla"

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, variant: str = "vanilla",
             k: int = 3) -> "ResidualBlock":
        depth = RESIDUAL_VARIANTS[variant]
        body = [ConvLayer.init(channels, channels, k, rng) for _ in range(depth)]
        # scaled-down last conv keeps the block near identity at init
        last = body[-1]
        body[-1] = ConvLayer(Tensor(last.weights.data * 0.1, True), last.bias, last.stride, last.padding)
        return cls(body, variant)

    def params(self) -> dict:
        out = {}
        for i, conv in enumerate(self.body):
            for name, t in conv.params().items():
                out[f"body{i}.{name}"] = t
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return residual_forward(x, self)


def residual_forward(input: Tensor, block: ResidualBlock) -> Tensor:
    h = input
    for i, conv in enumerate(block.body):
        if i:
            h = relu(h)
        h = conv2d(h, conv)
    if h.shape != input.shape:
        raise ShapeMismatch(f"residual body changed shape {list(input.shape)} -> {list(h.shape)}")
    return add(h, input)


# --------------------------------------------------------------- losses


def _check_labels(labels: Sequence[int], n: int, k: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise ShapeMismatch(f"{n} rows but {y.size} labels")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    return y


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeMismatch("logits must be [N, K]")
    N, K = z.shape
    y = _check_labels(labels, N, K)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsum - shifted[np.arange(N), y]))

    def backward(g):
        d = softmax(z)
        d[np.arange(N), y] -= 1.0
        return (d * (float(g) / N),)

    return record(np.asarray(loss), (logits,), backward)


def multiclass_hinge(scores: Tensor, labels: Sequence[int], margin: float = 1.0) -> Tensor:
    """Mean over rows of ``sum_{k != y} max(0, margin + s_k - s_y)``."""
    if not margin > 0:
        raise ValueError("margin must be positive")
    s = scores.data
    if s.ndim != 2:
        raise ShapeMismatch("scores must be [N, K]")
    N, K = s.shape
    y = _check_labels(labels, N, K)
    rows = np.arange(N)
    m = margin + s - s[rows, y][:, None]
    m[rows, y] = 0.0
    viol = m > 0
    loss = float(np.where(viol, m, 0.0).sum() / N) if N else 0.0

    def backward(g):
        d = viol.astype(np.float64)
        d[rows, y] = -d.sum(axis=1)
        return (d * (float(g) / max(N, 1)),)

    return record(np.asarray(loss), (scores,), backward)


def smooth_l1_bbox(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Mean over all ``N*4`` coordinates of the smooth-L1 penalty on ``pred - target``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {list(pred.shape)} vs target {list(target.shape)}")
    d = pred.data - target.data
    n = d.size
    ad = np.abs(d)
    quad = ad < beta
    vals = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    loss = float(vals.sum() / n) if n else 0.0

    def backward(g):
        gd = np.where(quad, d / beta, np.sign(d)) * (float(g) / max(n, 1))
        return (gd, -gd)

    return record(np.asarray(loss), (pred, target), backward)


@dataclass(frozen=True)
class LossBundle:
    cls_loss: Tensor
    bbox_loss: Tensor
    total: Tensor


def detection_loss(cls: Tensor, bbox: Tensor, cls_weight: float = 1.0, bbox_weight: float = 1.0) -> LossBundle:
    """Sum of the two head losses; unit weights unless configured otherwise."""
    for t in (cls, bbox):
        if t.size != 1 or not np.isfinite(t.data).all():
            raise NonFiniteInput("head losses must be finite scalars")
    c = cls if cls_weight == 1.0 else scale(cls, cls_weight)
    b = bbox if bbox_weight == 1.0 else scale(bbox, bbox_weight)
    return LossBundle(c, b, add(c, b))
