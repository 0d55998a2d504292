"""Multi-modal volumes: MVOL storage, slicing, modality fusion, augmentation,
volume-level splits and the synthetic lesion generator.

MVOL layout (little-endian)::

    b"MVOL1\\0"
    u32 modality_count
    per modality: 16-byte NUL-padded name, u32 D, u32 H, u32 W, D*H*W float32
    u32 label, u32 box_count
    per box: u32 slice, u32 x0, u32 y0, u32 x1, u32 y1, u32 cls

Boxes live in the axial plane (``x`` indexes W, ``y`` indexes H) and are
half-open.  Intensities are min-max normalized per modality on load; a
constant modality normalizes to zeros.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import BadMagic, InconsistentDims, MissingModality, TruncatedFile
from .proposals import RegionProposal
from .tensor import Tensor

MAGIC = b"MVOL1\x00"
MODALITIES = ("T1", "T1c", "T2", "FLAIR", "DWI", "PD", "MRA")
VIEWS = ("axial", "coronal", "sagittal")
CLASS_NAMES = ("healthy", "tumor-HGG", "tumor-LGG", "alzheimer", "multiple-sclerosis")
DEFAULT_TRIPLE = ("T1", "T1c", "FLAIR")


@dataclass
class MultiModalVolume:
    modalities: dict  # name -> Tensor [D, H, W]
    label: int = 0
    lesion_boxes: list = field(default_factory=list)  # (slice, x0, y0, x1, y1, cls)
    volume_id: str = ""

    def __post_init__(self):
        shapes = {t.shape for t in self.modalities.values()}
        if len(shapes) > 1:
            raise InconsistentDims(f"modalities disagree on dims: {sorted(shapes)}")
        for name in self.modalities:
            if name not in MODALITIES:
                raise MissingModality(f"unknown modality {name!r}")

    @property
    def shape(self) -> tuple:
        return next(iter(self.modalities.values())).shape


@dataclass
class FusedSlice:
    image: Tensor  # [k, h, w], one channel per modality of the triple
    view: str
    label: int
    source: tuple  # (volume_id, slice index)
    boxes: list = field(default_factory=list)  # (RegionProposal, cls)


# ------------------------------------------------------------------- MVOL


def normalize(arr: np.ndarray) -> np.ndarray:
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr, dtype=np.float64)
    return (arr - lo) / (hi - lo)


def save_volume(vol: MultiModalVolume, path) -> None:
    """Write MVOL; voxels are stored as float32."""
    parts = [MAGIC, struct.pack("<I", len(vol.modalities))]
    for name, t in vol.modalities.items():
        raw = name.encode("ascii")
        if len(raw) > 16:
            raise ValueError(f"modality name {name!r} longer than 16 bytes")
        parts.append(raw.ljust(16, b"\x00"))
        parts.append(struct.pack("<3I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    parts.append(struct.pack("<2I", int(vol.label), len(vol.lesion_boxes)))
    for box in vol.lesion_boxes:
        parts.append(struct.pack("<6I", *(int(v) for v in box)))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_volume(path, volume_id: str | None = None) -> MultiModalVolume:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: not an MVOL file")
    r = _Reader(buf)
    r.take(len(MAGIC))
    mods = {}
    dims = None
    for _ in range(r.u32()):
        name = r.take(16).rstrip(b"\x00").decode("ascii")
        d, h, w = r.u32(3)
        if dims is not None and (d, h, w) != dims:
            raise InconsistentDims(f"modality {name} has dims {(d, h, w)}, expected {dims}")
        dims = (d, h, w)
        vox = np.frombuffer(r.take(4 * d * h * w), dtype="<f4").astype(np.float64)
        mods[name] = Tensor(normalize(vox.reshape(d, h, w)))
    label, nbox = r.u32(2)
    boxes = [tuple(r.u32(6)) for _ in range(nbox)]
    vid = volume_id if volume_id is not None else str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return MultiModalVolume(mods, int(label), boxes, vid)


# ---------------------------------------------------------------- slicing

_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}


def _resolve(vol: MultiModalVolume, name: str, fallback: dict | None) -> Tensor:
    if name in vol.modalities:
        return vol.modalities[name]
    alt = (fallback or {}).get(name)
    if alt is not None and alt in vol.modalities:
        return vol.modalities[alt]
    raise MissingModality(f"volume {vol.volume_id!r} lacks modality {name!r}")


def lesion_mask(vol: MultiModalVolume) -> np.ndarray:
    """3-D boolean mask (and class map) built from the axial lesion boxes."""
    D, H, W = vol.shape
    mask = np.zeros((D, H, W), dtype=np.int64)
    for z, x0, y0, x1, y1, cls in vol.lesion_boxes:
        region = mask[z, y0:y1, x0:x1]
        np.maximum(region, cls, out=region)
    return mask


def _plane(arr: np.ndarray, view: str, index: int) -> np.ndarray:
    return np.take(arr, index, axis=_AXIS[view])


def slice_boxes(vol: MultiModalVolume, view: str, index: int, mask: np.ndarray | None = None) -> list:
    """Ground-truth ``(RegionProposal, cls)`` pairs for one slice of a view."""
    if view == "axial":
        return [(RegionProposal(x0, y0, x1, y1), cls)
                for z, x0, y0, x1, y1, cls in vol.lesion_boxes if z == index]
    m = _plane(lesion_mask(vol) if mask is None else mask, view, index)
    labels, _ = ndimage.label(m > 0)
    out = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        ys, xs = sl
        out.append((RegionProposal(xs.start, ys.start, xs.stop, ys.stop), int(m[sl][labels[sl] == k].max())))
    return out


def fuse_modalities(vol: MultiModalVolume, triple: Sequence[str] = DEFAULT_TRIPLE, index: int = 0,
                    view: str = "axial", fallback: dict | None = None) -> FusedSlice:
    """Stack one slice of each named modality as channels, in the given order."""
    if view not in _AXIS:
        raise ValueError(f"view must be one of {VIEWS}")
    chans = [_plane(_resolve(vol, name, fallback).data, view, index) for name in triple]
    img = Tensor(np.stack(chans))
    return FusedSlice(img, view, vol.label, (vol.volume_id, index), slice_boxes(vol, view, index))


def extract_slices(vol: MultiModalVolume, view: str = "axial", lesion_only: bool = False,
                   triple: Sequence[str] = DEFAULT_TRIPLE, fallback: dict | None = None) -> list:
    """One fused slice per index along the view axis.

    With ``lesion_only`` only slices that intersect a lesion box are kept; a
    volume without any boxes keeps every slice.
    """
    for name in triple:
        _resolve(vol, name, fallback)
    axis = _AXIS[view]
    n = vol.shape[axis]
    mask = lesion_mask(vol)
    keep = range(n)
    if lesion_only and vol.lesion_boxes:
        other = tuple(a for a in range(3) if a != axis)
        hit = mask.any(axis=other)
        keep = [i for i in range(n) if hit[i]]
    out = []
    for i in keep:
        chans = [_plane(_resolve(vol, name, fallback).data, view, i) for name in triple]
        out.append(FusedSlice(Tensor(np.stack(chans)), view, vol.label, (vol.volume_id, i),
                              slice_boxes(vol, view, i, mask)))
    return out


# ----------------------------------------------------------- augmentation

DEFAULT_SCALES = (0.75, 1.25)


def _flip_boxes(boxes, size, horizontal):
    out = []
    for b, cls in boxes:
        if horizontal:
            out.append((RegionProposal(size - b.x1, b.y0, size - b.x0, b.y1), cls))
        else:
            out.append((RegionProposal(b.x0, size - b.y1, b.x1, size - b.y0), cls))
    return out


def scale_image(img: np.ndarray, s: float) -> np.ndarray:
    """Bilinear zoom about the image center, cropped/zero-padded to the same size."""
    if s == 1.0:
        return img.copy()
    H, W = img.shape[-2:]
    cy, cx = H / 2.0, W / 2.0
    # output pixel center o maps to input position (o + .5 - c) / s + c - .5
    offset = ((0.5 - cy) / s + cy - 0.5, (0.5 - cx) / s + cx - 0.5)
    return np.stack([ndimage.affine_transform(ch, np.diag([1.0 / s, 1.0 / s]), offset=offset, order=1,
                                              mode="constant", cval=0.0) for ch in img])


def _scale_boxes(boxes, H, W, s):
    out = []
    for b, cls in boxes:
        x0 = max(0, int(np.floor((b.x0 - W / 2.0) * s + W / 2.0)))
        y0 = max(0, int(np.floor((b.y0 - H / 2.0) * s + H / 2.0)))
        x1 = min(W, int(np.ceil((b.x1 - W / 2.0) * s + W / 2.0)))
        y1 = min(H, int(np.ceil((b.y1 - H / 2.0) * s + H / 2.0)))
        if x1 > x0 and y1 > y0:
            out.append((RegionProposal(x0, y0, x1, y1), cls))
    return out


def _parse_op(op):
    if isinstance(op, tuple):
        return op[0], float(op[1])
    if isinstance(op, str) and op.startswith("scale"):
        return "scale", float(op.split(":", 1)[1]) if ":" in op else None
    return op, None


def augment(sl: FusedSlice, ops: Sequence = ("hflip", "vflip")) -> list:
    """The original slice plus one transformed copy per op.

    Ops: ``"hflip"``, ``"vflip"``, ``("scale", s)`` or ``"scale:s"``; a bare
    ``"scale"`` expands to every default factor.
    """
    img = sl.image.data
    H, W = img.shape[-2:]
    out = [sl]
    for op in ops:
        kind, s = _parse_op(op)
        if kind == "hflip":
            out.append(replace(sl, image=Tensor(img[:, :, ::-1]), boxes=_flip_boxes(sl.boxes, W, True)))
        elif kind == "vflip":
            out.append(replace(sl, image=Tensor(img[:, ::-1, :]), boxes=_flip_boxes(sl.boxes, H, False)))
        elif kind == "scale":
            for factor in (DEFAULT_SCALES if s is None else (s,)):
                out.append(replace(sl, image=Tensor(scale_image(img, factor)),
                                   boxes=_scale_boxes(sl.boxes, H, W, factor)))
        else:
            raise ValueError(f"unknown augmentation {op!r}")
    return out


def balance_classes(slices: Sequence[FusedSlice], seed: int = 0) -> list:
    """Oversample every class up to the largest class count.

    Extra copies are drawn with replacement by a seeded RNG and appended after
    the originals, class by class in label order.
    """
    by_label: dict = {}
    for s in slices:
        by_label.setdefault(s.label, []).append(s)
    if not by_label:
        return []
    target = max(len(v) for v in by_label.values())
    rng = np.random.default_rng(seed)
    out = list(slices)
    for label in sorted(by_label):
        group = by_label[label]
        extra = target - len(group)
        if extra:
            out.extend(group[int(i)] for i in rng.integers(0, len(group), size=extra))
    return out


# ----------------------------------------------------------------- splits


def split_volumes(labels: Sequence[int], fractions: Sequence[float], seed: int = 0) -> list:
    """Stratified, seeded partition of volume indices into ``len(fractions)`` disjoint groups."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError("split fractions must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    groups = [[] for _ in fr]
    labels = list(labels)
    for cls in sorted(set(labels)):
        idx = [i for i, l in enumerate(labels) if l == cls]
        idx = [idx[k] for k in rng.permutation(len(idx))]
        counts = np.floor(fr * len(idx)).astype(int)
        # leftovers go to the groups with the largest remainders, earliest first
        rem = fr * len(idx) - counts
        for k in np.argsort(-rem, kind="stable")[: len(idx) - counts.sum()]:
            counts[k] += 1
        start = 0
        for g, c in enumerate(counts):
            groups[g].extend(idx[start:start + c])
            start += c
    return [sorted(g) for g in groups]


# -------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 5
    volumes_per_class: int = 10
    depth: int = 12
    height: int = 64
    width: int = 64
    modalities: tuple = ("T1", "T1c", "T2", "FLAIR")
    distractors: tuple = (1, 3)  # min, max single-modality bright spots per volume
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.volumes_per_class < 1:
            raise ValueError("volumes_per_class must be >= 1")
        if not 1 <= self.classes <= 5:
            raise ValueError("classes must be between 1 and 5")
        if min(self.height, self.width) < 16 or self.depth < 1:
            raise ValueError("volume must be at least 1x16x16")


# baseline tissue appearance: (white matter, gray matter, csf) per modality
_TISSUE = {
    "T1": (0.70, 0.50, 0.12),
    "T1c": (0.68, 0.52, 0.14),
    "T2": (0.40, 0.55, 0.92),
    "FLAIR": (0.45, 0.55, 0.08),
    "DWI": (0.45, 0.50, 0.20),
    "PD": (0.60, 0.70, 0.85),
    "MRA": (0.20, 0.22, 0.10),
}

# lesion contrast added to the local tissue, per modality
_LESION_CONTRAST = {
    1: {"T1": -0.20, "T1c": -0.20, "T2": 0.35, "FLAIR": 0.45, "DWI": 0.40, "PD": 0.25, "MRA": 0.0},
    2: {"T1": -0.28, "T1c": -0.18, "T2": 0.40, "FLAIR": 0.40, "DWI": 0.25, "PD": 0.30, "MRA": 0.0},
    4: {"T1": -0.32, "T1c": 0.00, "T2": 0.35, "FLAIR": 0.40, "DWI": 0.30, "PD": 0.25, "MRA": 0.0},
}


RIM_LEVEL = 1.0


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.normal(size=shape), sigma)
    return f / (np.abs(f).max() + 1e-12)


def _ellipsoid(grid, center, radii):
    zz, yy, xx = grid
    return np.sqrt(((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2
                   + ((xx - center[2]) / radii[2]) ** 2)


def _soft(r, sharp=10.0):
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * sharp, -50, 50)))


def _boxes_from_mask(mask: np.ndarray, cls: int, min_area: int = 6) -> list:
    out = []
    for z in range(mask.shape[0]):
        ys, xs = np.nonzero(mask[z])
        if ys.size >= min_area:
            out.append((z, int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1, cls))
    return out


def _synth_volume(cfg: SynthConfig, label: int, rng: np.random.Generator, vid: str) -> MultiModalVolume:
    D, H, W = cfg.depth, cfg.height, cfg.width
    grid = np.meshgrid(np.arange(D) + 0.5, np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    zz, yy, xx = grid
    # slab through a large ellipsoidal brain: cross-section barely changes with z
    brain_c = (D / 2.0 + rng.uniform(-1, 1), H / 2.0 + rng.uniform(-2, 2), W / 2.0 + rng.uniform(-2, 2))
    brain_r = (3.0 * D, H * rng.uniform(0.36, 0.46), W * rng.uniform(0.33, 0.43))
    r_brain = _ellipsoid(grid, brain_c, brain_r)
    brain = _soft(r_brain, 14.0)
    # bright scalp rim: every modality's maximum sits here, so min-max scaling
    # does not depend on whether a lesion is present
    rim = np.exp(-((r_brain - 1.08) / 0.03) ** 2)
    # cortex ring plus smooth texture decides gray vs white matter
    texture = _smooth_field(rng, (D, H, W), 2.5)
    gray = np.clip(_soft(-(r_brain - 0.80) / 0.2 + 1.0, 6.0) + 0.35 * texture, 0.0, 1.0)

    vent_scale = rng.uniform(1.6, 2.1) if label == 3 else rng.uniform(0.85, 1.15)
    vent = np.zeros((D, H, W))
    vent_boxes = []
    for side in (-1, 1):
        c = (brain_c[0], brain_c[1] + rng.uniform(-2, 2), brain_c[2] + side * W * 0.07)
        radii = (3.0 * D, H * 0.10 * vent_scale, W * 0.035 * vent_scale)
        part = _soft(_ellipsoid(grid, c, radii), 8.0)
        vent = np.maximum(vent, part)
        if label == 3:
            vent_boxes += _boxes_from_mask(part > 0.5, 3)
    csf = vent
    if label == 3:
        # widened sulci: dark CSF pockets along the cortex
        sulci = (_smooth_field(rng, (D, H, W), 1.2) > 0.35) & (r_brain > 0.78) & (r_brain < 0.98)
        csf = np.maximum(csf, 0.9 * sulci)

    lesions = []  # (soft profile, hard mask, contrast dict, ring)
    boxes = list(vent_boxes)
    if label in (1, 2):
        rad = rng.uniform(6.0, 9.0) if label == 1 else rng.uniform(5.5, 8.0)
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.15, 0.45)
        c = (rng.uniform(D * 0.3, D * 0.7), brain_c[1] + dist * brain_r[1] * np.sin(ang),
             brain_c[2] + dist * brain_r[2] * np.cos(ang))
        radii = (rng.uniform(2.0, 3.5), rad * rng.uniform(0.8, 1.2), rad * rng.uniform(0.8, 1.2))
        r = _ellipsoid(grid, c, radii)
        lesions.append((_soft(r), r <= 1.0, _LESION_CONTRAST[label], r if label == 1 else None))
        boxes += _boxes_from_mask(r <= 1.0, label)
    elif label == 4:
        for _ in range(rng.integers(6, 11)):
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0.2, 0.55)
            c = (rng.uniform(0, D), brain_c[1] + dist * brain_r[1] * np.sin(ang),
                 brain_c[2] + dist * brain_r[2] * np.cos(ang))
            rad = rng.uniform(2.2, 3.2)
            radii = (rng.uniform(1.2, 2.2), rad, rad * rng.uniform(0.7, 1.3))
            r = _ellipsoid(grid, c, radii)
            lesions.append((_soft(r), r <= 1.0, _LESION_CONTRAST[4], None))
            boxes += _boxes_from_mask(r <= 1.0, 4)

    mods = list(cfg.modalities)
    distract = []
    for _ in range(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1)):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.1, 0.6)
        c = (rng.uniform(0, D), brain_c[1] + dist * brain_r[1] * np.sin(ang),
             brain_c[2] + dist * brain_r[2] * np.cos(ang))
        rad = rng.uniform(2.0, 5.0)
        r = _ellipsoid(grid, c, (rng.uniform(1.0, 3.0), rad, rad))
        distract.append((_soft(r), mods[rng.integers(len(mods))], rng.uniform(0.3, 0.45)))

    out = {}
    bias = 1.0 + 0.12 * _smooth_field(rng, (D, H, W), 8.0)
    for name in mods:
        wm, gm, cs = _TISSUE[name]
        img = wm * (1.0 - gray) + gm * gray
        img = img * (1.0 - csf) + cs * csf
        for soft, _, contrast, ring in lesions:
            img = img + contrast[name] * soft
            if ring is not None and name == "T1c":
                # enhancing rim with necrotic core
                img = img + 0.5 * np.exp(-((ring - 0.85) / 0.12) ** 2) - 0.15 * _soft(ring / 0.6)
            if ring is not None and name in ("FLAIR", "T2"):
                img = img + 0.2 * _soft(ring / 1.6, 4.0) * (1.0 - soft)  # edema halo
        for soft, mod, amp in distract:
            if mod == name:
                img = img + amp * soft
        img = np.minimum(img, RIM_LEVEL - 0.05) * brain + RIM_LEVEL * rim
        img = img * bias * rng.uniform(0.85, 1.15)
        img = img + cfg.noise * rng.normal(size=img.shape) * np.maximum(brain, rim)
        img = np.clip(img, 0.0, None)
        # store exactly what a float32 MVOL round trip will reproduce
        out[name] = Tensor(normalize(normalize(img).astype(np.float32).astype(np.float64)))
    return MultiModalVolume(out, label, boxes, vid)


def generate_synthetic_dataset(cfg: SynthConfig = SynthConfig()) -> list:
    """Seeded, bit-reproducible volumes, ``volumes_per_class`` for each class id."""
    rng = np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2**63 - 1, size=(cfg.classes, cfg.volumes_per_class))
    vols = []
    for label in range(cfg.classes):
        for k in range(cfg.volumes_per_class):
            vrng = np.random.default_rng(int(seeds[label, k]))
            vols.append(_synth_volume(cfg, label, vrng, f"vol_c{label}_{k:03d}"))
    return vols
