"""Spatial pyramid pooling of proposal regions on a feature map.

A region is split into ``g x g`` sub-windows per pyramid level using integer
bin edges ``floor(i * extent / g)``; each sub-window is pooled per channel
(l2 norm by default, max for the ablation) and the levels are concatenated
in order, channel-major within a level.  For the default levels (4, 2, 1)
the output length is ``21 * C`` whatever the region size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import EmptyBox, ShapeMismatch
from .proposals import RegionProposal
from .tensor import Tensor, record, reshape

POOL_EPS = 1e-12


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple = (4, 2, 1)
    pool: str = "l2"

    def __post_init__(self):
        if not self.levels or any(int(g) < 1 for g in self.levels):
            raise ValueError("pyramid levels must be >= 1")
        if self.pool not in ("l2", "max"):
            raise ValueError("pool must be 'l2' or 'max'")

    @property
    def cells(self) -> int:
        return sum(g * g for g in self.levels)

    def output_length(self, channels: int) -> int:
        return channels * self.cells


@dataclass(frozen=True)
class FeatureRegion:
    """Box in feature-map cells, half-open, plus the feature map it indexes."""

    x0: int
    y0: int
    x1: int
    y1: int
    feature: Tensor | None = None

    def coords(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)


def _round_half_down(v: float) -> int:
    return math.ceil(v - 0.5)


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def map_proposal_to_feature(box: RegionProposal, image_size: Sequence[int], feature_size: Sequence[int],
                            feature: Tensor | None = None) -> FeatureRegion:
    """Scale an image-space box (sizes given as ``(H, W)``) onto the feature grid."""
    if box.area <= 0:
        raise EmptyBox("proposal has zero area")
    ih, iw = image_size
    fh, fw = feature_size
    sy, sx = fh / ih, fw / iw
    x0 = min(max(_round_half_down(box.x0 * sx), 0), fw - 1)
    y0 = min(max(_round_half_down(box.y0 * sy), 0), fh - 1)
    x1 = min(max(_round_half_up(box.x1 * sx), x0 + 1), fw)
    y1 = min(max(_round_half_up(box.y1 * sy), y0 + 1), fh)
    return FeatureRegion(x0, y0, x1, y1, feature)


def bin_edges(extent: int, g: int) -> list:
    """``g`` half-open bins over ``[0, extent)``; bins are widened to one cell when ``extent < g``."""
    out = []
    for i in range(g):
        start = min((i * extent) // g, extent - 1)
        end = max(((i + 1) * extent) // g, start + 1)
        out.append((start, end))
    return out


def region_rects(region: Sequence[int], levels: Sequence[int]) -> np.ndarray:
    """All sub-window rectangles ``(y0, y1, x0, x1)`` of one region, level by level."""
    x0, y0, x1, y1 = region
    rects = []
    for g in levels:
        rows = bin_edges(y1 - y0, g)
        cols = bin_edges(x1 - x0, g)
        for ra, rb in rows:
            for ca, cb in cols:
                rects.append((y0 + ra, y0 + rb, x0 + ca, x0 + cb))
    return np.array(rects, dtype=np.int64)


def pyramid_pool_regions(feature: Tensor, regions: Sequence[Sequence[int]], spec: PyramidSpec = PyramidSpec()) -> Tensor:
    """Pool many regions of one ``[C, H, W]`` map into ``[R, C * cells]`` as a single op."""
    x = np.ascontiguousarray(feature.data)
    if x.ndim != 3:
        raise ShapeMismatch("feature map must be [C, H, W]")
    C, H, W = x.shape
    R = len(regions)
    cells = spec.cells
    for r in regions:
        if not (0 <= r[0] < r[2] <= W and 0 <= r[1] < r[3] <= H):
            raise ShapeMismatch(f"region {tuple(r)} outside feature map {H}x{W}")
    if R == 0:
        return record(np.zeros((0, C * cells)), (feature,), lambda g: (np.zeros_like(x),))
    rects = np.ascontiguousarray(np.concatenate([region_rects(r, spec.levels) for r in regions]))
    is_max = spec.pool == "max"
    pooled, idx = kernels.backend.rect_pool_fwd(x, rects, is_max)
    pooled = np.asarray(pooled)
    idx = np.asarray(idx)
    per = pooled.reshape(R, cells, C)
    parts, start = [], 0
    for g in spec.levels:
        parts.append(per[:, start:start + g * g, :].transpose(0, 2, 1).reshape(R, C * g * g))
        start += g * g
    out = np.concatenate(parts, axis=1)

    def backward(grad):
        back, off = [], 0
        for g in spec.levels:
            back.append(grad[:, off:off + C * g * g].reshape(R, C, g * g).transpose(0, 2, 1))
            off += C * g * g
        gr = np.ascontiguousarray(np.concatenate(back, axis=1).reshape(R * cells, C))
        gx = kernels.backend.rect_pool_bwd(x, rects, pooled, idx, gr, is_max, POOL_EPS)
        return (np.asarray(gx),)

    return record(out, (feature,), backward)


def pyramid_pool(region: FeatureRegion, spec: PyramidSpec = PyramidSpec()) -> Tensor:
    if region.feature is None:
        raise ValueError("region carries no feature map")
    out = pyramid_pool_regions(region.feature, [region.coords()], spec)
    return reshape(out, (out.shape[1],))
