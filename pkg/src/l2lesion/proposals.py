"""Region proposals, IoU, non-maximum suppression and proposal labeling.

Proposals come from a lightweight stand-in for selective search:

1. per channel, subtract a median-filtered background and threshold the
   bright and the dark residue at several contrast levels; every connected
   component gives its tight box,
2. threshold the channel-mean image at several levels the same way,
3. merge adjacent contrast components greedily, smallest combined area
   first, recording every merged box,
4. add multi-scale sliding windows,

then drop near-duplicates (IoU > 0.95).  Any externally produced list (for
example from a real selective-search run) can be supplied instead through
the CSV format handled by :func:`read_proposals_csv`.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyBox, ImageTooSmall, UnscoredProposal


@dataclass(frozen=True)
class RegionProposal:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int
    score: float | None = None

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise EmptyBox(f"box ({self.x0},{self.y0})-({self.x1},{self.y1}) has no area")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def coords(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)

    def with_score(self, score: float) -> "RegionProposal":
        return replace(self, score=float(score))

    def clip(self, height: int, width: int) -> "RegionProposal":
        return RegionProposal(min(max(self.x0, 0), width - 1), min(max(self.y0, 0), height - 1),
                              min(max(self.x1, 1), width), min(max(self.y1, 1), height), self.score)


@dataclass(frozen=True)
class LabeledProposal:
    proposal: RegionProposal
    cls: int
    regression_target: tuple | None = None


def iou(a: RegionProposal, b: RegionProposal) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: Sequence[RegionProposal], b: Sequence[RegionProposal]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([p.coords() for p in a], dtype=np.float64)
    B = np.array([p.coords() for p in b], dtype=np.float64)
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


# ------------------------------------------------------------ box coding


def encode_box(proposal: RegionProposal, target: RegionProposal) -> tuple:
    """Center/log-size offsets ``(tx, ty, tw, th)`` of ``target`` relative to ``proposal``."""
    wa, ha = proposal.width, proposal.height
    xa, ya = proposal.x0 + wa / 2.0, proposal.y0 + ha / 2.0
    w, h = target.width, target.height
    x, y = target.x0 + w / 2.0, target.y0 + h / 2.0
    return ((x - xa) / wa, (y - ya) / ha, math.log(w / wa), math.log(h / ha))


def decode_box(proposal: RegionProposal, deltas: Sequence[float], height: int, width: int,
               score: float | None = None) -> RegionProposal:
    """Inverse of :func:`encode_box`, rounded to pixels and clipped to the image."""
    tx, ty, tw, th = (float(d) for d in deltas)
    wa, ha = proposal.width, proposal.height
    cx = proposal.x0 + wa / 2.0 + tx * wa
    cy = proposal.y0 + ha / 2.0 + ty * ha
    w = wa * math.exp(min(tw, 4.0))
    h = ha * math.exp(min(th, 4.0))
    x0 = int(np.clip(round(cx - w / 2.0), 0, width - 1))
    y0 = int(np.clip(round(cy - h / 2.0), 0, height - 1))
    x1 = int(np.clip(round(cx + w / 2.0), x0 + 1, width))
    y1 = int(np.clip(round(cy + h / 2.0), y0 + 1, height))
    return RegionProposal(x0, y0, x1, y1, score)


# ------------------------------------------------------------ generation


@dataclass(frozen=True)
class ProposalConfig:
    thresholds: tuple = (0.35, 0.5, 0.65, 0.8)
    contrast_thresholds: tuple = (0.06, 0.12, 0.2)
    background_size: int = 11  # median filter width for the local background
    min_component_area: int = 4
    merge_gap: int = 1
    window_fractions: tuple = (0.25, 0.5)
    max_proposals: int = 200
    dedup_iou: float = 0.95
    seed: int = 0


def _component_boxes(gray: np.ndarray, thresholds: Sequence[float], cfg: ProposalConfig) -> list:
    boxes = []
    for t in thresholds:
        labels, count = ndimage.label(gray >= t)
        if count == 0:
            continue
        for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None:
                continue
            ys, xs = sl
            area = int((labels[sl] == idx).sum())
            if area < cfg.min_component_area:
                continue
            boxes.append((xs.start, ys.start, xs.stop, ys.stop))
    return boxes


def _contrast_boxes(arr: np.ndarray, cfg: ProposalConfig) -> tuple:
    """Components of each channel's bright and dark residue; also the residue magnitude map."""
    boxes, strength = [], np.zeros(arr.shape[1:])
    for ch in arr:
        ch = ndimage.gaussian_filter(ch, 0.7)
        resid = ch - ndimage.median_filter(ch, size=cfg.background_size)
        strength = np.maximum(strength, np.abs(resid))
        for sign in (1.0, -1.0):
            boxes += _component_boxes(sign * resid, cfg.contrast_thresholds, cfg)
    return boxes, strength


def _adjacent(a, b, gap) -> bool:
    return (a[0] - gap < b[2] and b[0] - gap < a[2] and a[1] - gap < b[3] and b[1] - gap < a[3])


def _greedy_merge(boxes: list, gap: int) -> list:
    regions = list(dict.fromkeys(boxes))
    merged = []
    while len(regions) > 1:
        best = None
        for i in range(len(regions)):
            for j in range(i + 1, len(regions)):
                a, b = regions[i], regions[j]
                if not _adjacent(a, b, gap):
                    continue
                u = (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))
                size = (u[2] - u[0]) * (u[3] - u[1])
                if best is None or size < best[0]:
                    best = (size, i, j, u)
        if best is None:
            break
        _, i, j, u = best
        regions = [r for k, r in enumerate(regions) if k not in (i, j)] + [u]
        merged.append(u)
    return merged


def _sliding_windows(H: int, W: int, cfg: ProposalConfig) -> list:
    out = []
    for frac in cfg.window_fractions:
        size = max(2, int(round(min(H, W) * frac)))
        step = max(1, size // 2)
        for y in range(0, H - size + 1, step):
            for x in range(0, W - size + 1, step):
                out.append((x, y, x + size, y + size))
    return out


def generate_proposals(image, cfg: ProposalConfig = ProposalConfig()) -> list:
    """Deterministic proposal list for a ``[C, H, W]`` image (values roughly in [0, 1])."""
    arr = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    _, H, W = arr.shape
    if H < 16 or W < 16:
        raise ImageTooSmall(f"image {H}x{W} is smaller than 16x16")
    gray = arr.mean(axis=0)
    span = gray.max() - gray.min()
    gray = (gray - gray.min()) / span if span > 0 else np.zeros_like(gray)

    def mean_score(b):
        return float(gray[b[1]:b[3], b[0]:b[2]].mean())

    contrast, strength = _contrast_boxes(arr, cfg)
    contrast = list(dict.fromkeys(contrast))

    def contrast_score(b):
        return float(strength[b[1]:b[3], b[0]:b[2]].mean())

    merged = _greedy_merge(contrast, cfg.merge_gap)
    blobs = sorted(dict.fromkeys(contrast + merged), key=lambda b: (-contrast_score(b), b))
    comps = _component_boxes(gray, cfg.thresholds, cfg) if span > 0 else []
    segment_boxes = blobs + sorted(dict.fromkeys(c for c in comps if c not in set(blobs)),
                                   key=lambda b: (-mean_score(b), b))
    windows = _sliding_windows(H, W, cfg)
    room = cfg.max_proposals - len(segment_boxes)
    if 0 < room < len(windows):
        rng = np.random.default_rng(cfg.seed)
        keep = np.sort(rng.choice(len(windows), size=room, replace=False))
        windows = [windows[k] for k in keep]
    elif room <= 0:
        windows = []

    cands = [RegionProposal(*b, score=mean_score(b)) for b in segment_boxes + windows]
    overlap = iou_matrix(cands, cands)
    keep: list[int] = []
    for i in range(len(cands)):
        if not keep or overlap[i, keep].max() <= cfg.dedup_iou:
            keep.append(i)
            if len(keep) >= cfg.max_proposals:
                break
    return [cands[i] for i in keep]


# -------------------------------------------------------------- labeling


def label_proposals(proposals: Sequence[RegionProposal], ground_truth: Sequence[tuple],
                    fg_threshold: float = 0.5, bg_upper: float = 0.5) -> list:
    """Assign each proposal the class of its best-matching ground truth box.

    ``ground_truth`` holds ``(RegionProposal, cls)`` pairs with ``cls >= 1``.
    Proposals with best IoU in ``[bg_upper, fg_threshold)`` are dropped.
    """
    if not (0 < bg_upper <= fg_threshold <= 1):
        raise ValueError("need 0 < bg_upper <= fg_threshold <= 1")
    gts = [g for g, _ in ground_truth]
    ious = iou_matrix(list(proposals), gts)
    out = []
    for i, p in enumerate(proposals):
        if gts:
            j = int(np.argmax(ious[i]))
            best = float(ious[i, j])
        else:
            j, best = -1, 0.0
        if best >= fg_threshold:
            out.append(LabeledProposal(p, int(ground_truth[j][1]), encode_box(p, gts[j])))
        elif best < bg_upper:
            out.append(LabeledProposal(p, 0, None))
    return out


def nms(proposals: Sequence[RegionProposal], iou_threshold: float = 0.5) -> list:
    """Greedy suppression in descending score order; ties keep the earlier index."""
    if any(p.score is None for p in proposals):
        raise UnscoredProposal("every proposal needs a score for NMS")
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i].score)
    kept: list[RegionProposal] = []
    for i in order:
        p = proposals[i]
        if all(iou(p, q) <= iou_threshold for q in kept):
            kept.append(p)
    return kept


# --------------------------------------------------------------- CSV I/O

CSV_HEADER = ["x0", "y0", "x1", "y1", "score"]


def write_proposals_csv(proposals: Iterable[RegionProposal], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for p in proposals:
            w.writerow([p.x0, p.y0, p.x1, p.y1, "" if p.score is None else repr(float(p.score))])


def read_proposals_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"proposal CSV header must be {','.join(CSV_HEADER)}")
        return [RegionProposal(int(r["x0"]), int(r["y0"]), int(r["x1"]), int(r["y1"]),
                               float(r["score"]) if r["score"] else None) for r in reader]
