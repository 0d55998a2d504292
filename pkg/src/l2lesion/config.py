"""Run configuration: a flat ``key = value`` text format.

Blank lines and ``#`` comments are ignored; list values are comma
separated; unknown keys are errors.  Every key of :class:`RunConfig` may
appear.  Example::

    task = classify
    pooling = l2
    modalities = T1, T1c, FLAIR
    epochs = 12
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .data import MODALITIES, SynthConfig
from .errors import BadConfig


@dataclass
class RunConfig:
    task: str = "classify"
    pooling: str = "l2"
    gradient_mode: str = "analytic"
    normalized: bool = False
    modalities: tuple = ("T1", "T1c", "FLAIR")
    fallback: tuple = ()  # "FLAIR:DWI" pairs
    pyramid_levels: tuple = (4, 2, 1)
    channels: tuple = (8, 16)
    residual_variant: str = "dense"
    hidden: int = 64
    epochs: int = 14
    batch_size: int = 16
    learning_rate: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_step: int = 10  # epochs between decays; 0 keeps the rate constant
    lr_gamma: float = 0.1
    seed: int = 0
    split: tuple = (0.8, 0.2)
    detect_split: tuple = (0.7, 0.1, 0.2)
    augment: tuple = ("hflip", "vflip")
    balance: bool = True  # oversample minority classes in classification training
    views: tuple = ("axial",)
    lesion_only: bool = True
    dataset: str = ""
    # synthetic data used when no dataset directory is given
    volumes_per_class: int = 14
    depth: int = 12
    height: int = 64
    width: int = 64
    synth_modalities: tuple = ("T1", "T1c", "T2", "FLAIR")
    synth_seed: int = 0
    # detection
    detect_classes: tuple = (1, 2, 4)
    rois_per_image: int = 16
    fg_fraction: float = 0.5
    fg_threshold: float = 0.5
    bg_upper: float = 0.5
    score_threshold: float = 0.0
    nms_iou: float = 0.3
    max_proposals: int = 120
    hinge_margin: float = 1.0
    smooth_l1_beta: float = 1.0
    cls_weight: float = 1.0
    bbox_weight: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise BadConfig(msg)

        need(self.task in ("classify", "detect"), "task must be classify or detect")
        need(self.pooling in ("l2", "max"), "pooling must be l2 or max")
        need(self.gradient_mode in ("analytic", "paper_literal"), "gradient_mode must be analytic or paper_literal")
        need(len(self.modalities) >= 1, "modalities must name at least one modality")
        for m in tuple(self.modalities) + tuple(self.synth_modalities):
            need(m in MODALITIES, f"unknown modality {m!r}")
        for pair in self.fallback:
            need(":" in pair and all(p in MODALITIES for p in pair.split(":")), f"bad fallback {pair!r}")
        need(len(self.channels) == 2 and min(self.channels) >= 1, "channels needs two positive entries")
        need(self.residual_variant in ("vanilla", "dense"), "residual_variant must be vanilla or dense")
        need(self.epochs >= 1 and self.batch_size >= 1, "epochs and batch_size must be >= 1")
        need(self.learning_rate > 0 and 0 <= self.momentum < 1, "bad learning rate or momentum")
        need(abs(sum(self.split) - 1) < 1e-9 and len(self.split) == 2, "split must be two fractions summing to 1")
        need(abs(sum(self.detect_split) - 1) < 1e-9 and len(self.detect_split) == 3,
             "detect_split must be three fractions summing to 1")
        need(self.volumes_per_class >= 1, "volumes_per_class must be >= 1")
        need(all(v in ("axial", "coronal", "sagittal") for v in self.views), "unknown view")
        need(all(g >= 1 for g in self.pyramid_levels) and self.pyramid_levels, "pyramid levels must be >= 1")
        need(0 < self.bg_upper <= self.fg_threshold <= 1, "need 0 < bg_upper <= fg_threshold <= 1")
        need(0 < self.fg_fraction <= 1, "fg_fraction must lie in (0, 1]")

    @property
    def fallback_map(self) -> dict:
        return dict(p.split(":", 1) for p in self.fallback)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(volumes_per_class=self.volumes_per_class, depth=self.depth, height=self.height,
                           width=self.width, modalities=tuple(self.synth_modalities), seed=self.synth_seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {f.name: (list(getattr(self, f.name)) if isinstance(getattr(self, f.name), tuple)
                         else getattr(self, f.name)) for f in fields(self)}


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], bool):
                return tuple(s.lower() == "true" for s in items)
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        return raw
    except ValueError as exc:
        raise BadConfig(f"bad value for {name}: {raw!r}") from exc


_DEFAULTS = RunConfig.__dataclass_fields__


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    changes = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _DEFAULTS:
            raise BadConfig(f"line {lineno}: unknown key {key!r}")
        changes[key] = _convert(key, value, getattr(base, key))
    return dataclasses.replace(base, **changes)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read(), base)
    except OSError as exc:
        raise BadConfig(f"cannot read config {path}: {exc}") from exc
