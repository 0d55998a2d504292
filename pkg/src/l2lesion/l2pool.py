"""Windowed l2-norm pooling.

Each output cell is ``sqrt(sum(x**2))`` over its ``f x f`` window, per
channel, with no padding (``H' = (H - f) // s + 1``).  Two backward rules
are available:

``analytic``
    ``d|w|/dx_k = x_k / max(|w|, eps)``; zero-norm windows get a zero
    gradient.  This is the default and the only mode used for training.
``paper_literal``
    ``n * g / (2 * max(|w|, eps))`` broadcast to every window element, with
    ``n`` the window element count.  It does not depend on ``x_k`` and is
    therefore not the derivative of the forward pass; ``gradcheck`` reports
    it as an expected failure.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeMismatch, WindowLargerThanInput
from .tensor import Tensor, record

GRADIENT_MODES = ("analytic", "paper_literal")


@dataclass(frozen=True)
class L2PoolConfig:
    filter_size: int = 2
    stride: int = 2
    normalized: bool = False
    gradient_mode: str = "analytic"
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.filter_size < 1 or self.stride < 1:
            raise ValueError("filter_size and stride must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")


def _as_planes(x: np.ndarray, fh: int, fw: int) -> np.ndarray:
    if x.ndim < 2:
        raise ShapeMismatch("pooling input needs at least 2 spatial dims")
    H, W = x.shape[-2:]
    if H < fh or W < fw:
        raise WindowLargerThanInput(f"window {fh}x{fw} larger than input {H}x{W}")
    return np.ascontiguousarray(x.reshape(-1, H, W))


def output_size(size: int, filter_size: int, stride: int) -> int:
    return (size - filter_size) // stride + 1


def _forward(x: np.ndarray, fh, fw, s, normalized) -> np.ndarray:
    planes = _as_planes(x, fh, fw)
    out = kernels.backend.l2_pool_fwd(planes, fh, fw, s, s, normalized)
    return np.asarray(out).reshape(x.shape[:-2] + out.shape[1:])


def _backward(x: np.ndarray, g: np.ndarray, fh, fw, s, cfg: L2PoolConfig) -> np.ndarray:
    planes = _as_planes(x, fh, fw)
    g_planes = np.ascontiguousarray(g.reshape((-1,) + g.shape[-2:]), dtype=np.float64)
    gx = kernels.backend.l2_pool_bwd(planes, g_planes, fh, fw, s, s, cfg.normalized,
                                     cfg.gradient_mode == "paper_literal", cfg.epsilon)
    return np.asarray(gx).reshape(x.shape)


def l2_pool_forward(input: Tensor, cfg: L2PoolConfig = L2PoolConfig()) -> Tensor:
    """Pool ``[..., H, W]`` to ``[..., H', W']``; recorded on the active tape."""
    f, s = cfg.filter_size, cfg.stride
    x = input.data
    out = _forward(x, f, f, s, cfg.normalized)
    return record(out, (input,), lambda g: (_backward(x, g, f, f, s, cfg),))


def l2_pool_backward(input: Tensor, upstream_grad: Tensor, cfg: L2PoolConfig = L2PoolConfig()) -> Tensor:
    f, s = cfg.filter_size, cfg.stride
    H, W = input.shape[-2:]
    expected = input.shape[:-2] + (output_size(H, f, s), output_size(W, f, s))
    if upstream_grad.shape != expected:
        raise ShapeMismatch(f"upstream grad shape {list(upstream_grad.shape)} != {list(expected)}")
    return Tensor._wrap(_backward(input.data, upstream_grad.data, f, f, s, cfg))


def global_l2_pool(input: Tensor, cfg: L2PoolConfig | None = None) -> Tensor:
    """Per-channel l2 norm over the whole plane: ``[..., H, W] -> [...]``.

    ``cfg`` supplies ``normalized``, ``gradient_mode`` and ``epsilon``; its
    window settings are ignored.
    """
    cfg = cfg or L2PoolConfig()
    x = input.data
    H, W = x.shape[-2:]
    out = _forward(x, H, W, 1, cfg.normalized).reshape(x.shape[:-2])
    return record(out, (input,),
                  lambda g: (_backward(x, g.reshape(g.shape + (1, 1)), H, W, 1, cfg),))
