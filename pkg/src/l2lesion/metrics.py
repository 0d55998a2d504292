"""Confusion matrix, classification rates, Cohen's kappa, Dice and report files.

Conventions: confusion rows are actual classes, columns predicted.  Multi-class
sensitivity, specificity and recall are macro averages of one-vs-rest rates
over the classes that have at least one actual (resp. negative) sample.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateKappa,
    DomainMismatch,
    IoFailure,
    LabelOutOfRange,
    UnscoredDetection,
)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def k(self) -> int:
        return self.counts.shape[0]


@dataclass
class EvalReport:
    accuracy: float
    sensitivity: float
    specificity: float
    recall: float
    kappa: float
    dice: float | None = None
    n_samples: int = 0
    per_class_sensitivity: list = field(default_factory=list)
    per_class_specificity: list = field(default_factory=list)
    confusion: list = field(default_factory=list)
    kappa_degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = [f.name for f in fields(cls)]
        if sorted(d) != sorted(names):
            raise ValueError(f"report keys {sorted(d)} do not match {sorted(names)}")
        return cls(**d)


REPORT_KEYS = tuple(f.name for f in fields(EvalReport))
CURVE_COLUMNS = ("iteration", "train_loss", "test_loss", "test_accuracy")


def confusion(predictions: Sequence[int], labels: Sequence[int], k: int) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    a = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.size != a.size:
        raise ValueError("predictions and labels differ in length")
    if p.size and (min(p.min(), a.min()) < 0 or max(p.max(), a.max()) >= k):
        raise LabelOutOfRange(f"class ids must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (a, p), 1)
    return ConfusionMatrix(counts)


def cohen_kappa(cm: ConfusionMatrix) -> tuple:
    """``(kappa, degenerate)``; degenerate when chance agreement is 1."""
    c = cm.counts.astype(np.float64)
    n = c.sum()
    po = np.trace(c) / n
    pe = float((c.sum(axis=1) * c.sum(axis=0)).sum() / (n * n))
    if pe == 1.0:
        return 0.0, True
    return float((po - pe) / (1.0 - pe)), False


def derive_metrics(cm: ConfusionMatrix, strict: bool = False) -> EvalReport:
    if cm.total <= 0:
        raise ValueError("confusion matrix is empty")
    c = cm.counts
    n = c.sum()
    tp = np.diag(c).astype(np.float64)
    actual = c.sum(axis=1).astype(np.float64)
    predicted = c.sum(axis=0).astype(np.float64)
    fn = actual - tp
    fp = predicted - tp
    tn = n - tp - fn - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        sens = np.where(actual > 0, tp / actual, np.nan)
        spec = np.where(tn + fp > 0, tn / (tn + fp), np.nan)
    macro_sens = float(np.nanmean(sens)) if np.any(~np.isnan(sens)) else 0.0
    macro_spec = float(np.nanmean(spec)) if np.any(~np.isnan(spec)) else 0.0
    kappa, degenerate = cohen_kappa(cm)
    if degenerate and strict:
        raise DegenerateKappa("chance agreement is 1; kappa undefined")
    return EvalReport(
        accuracy=float(np.trace(c) / n),
        sensitivity=macro_sens,
        specificity=macro_spec,
        recall=macro_sens,
        kappa=kappa,
        n_samples=int(n),
        per_class_sensitivity=[None if np.isnan(v) else float(v) for v in sens],
        per_class_specificity=[None if np.isnan(v) else float(v) for v in spec],
        confusion=c.tolist(),
        kappa_degenerate=degenerate,
    )


def table1_row(report: EvalReport) -> dict:
    """Accuracy in percent, recall in percent, the other rates as fractions."""
    return {
        "Total MRI": report.n_samples,
        "Accuracy": f"{100.0 * report.accuracy:.3f}%",
        "Sensitivity": round(report.sensitivity, 2),
        "Specificity": round(report.specificity, 2),
        "Recall": round(100.0 * report.recall, 2),
        "Kappa": round(report.kappa, 2),
    }


# ------------------------------------------------------------------ dice


def _box_coords(b):
    return b.coords() if hasattr(b, "coords") else tuple(int(v) for v in b[:4])


def rasterize(boxes, shape: Sequence[int]) -> np.ndarray:
    """Union mask of half-open ``(x0, y0, x1, y1)`` boxes on an ``(H, W)`` grid."""
    mask = np.zeros(tuple(shape), dtype=bool)
    for b in boxes:
        x0, y0, x1, y1 = _box_coords(b)
        mask[max(y0, 0):y1, max(x0, 0):x1] = True
    return mask


def _is_mask(v) -> bool:
    return isinstance(v, np.ndarray) and v.dtype == bool


def dice(a, b, shape: Sequence[int] | None = None) -> float:
    """``2|a & b| / (|a| + |b|)`` for two boolean masks or two box lists; 1.0 when both are empty."""
    if _is_mask(a) != _is_mask(b):
        raise DomainMismatch("cannot compare a mask with a box set")
    if _is_mask(a):
        if a.shape != b.shape:
            raise DomainMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
        ma, mb = a.astype(bool), b.astype(bool)
    else:
        if shape is None:
            coords = [_box_coords(x) for x in list(a) + list(b)]
            shape = (max([c[3] for c in coords], default=0), max([c[2] for c in coords], default=0))
        ma, mb = rasterize(a, shape), rasterize(b, shape)
    sa, sb = int(ma.sum()), int(mb.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / (sa + sb)


def detection_dice(detections, ground_truth, score_threshold: float, shape: Sequence[int]) -> float:
    """Mask Dice between detections scoring at least ``score_threshold`` and the truth boxes."""
    if any(getattr(d, "score", None) is None for d in detections):
        raise UnscoredDetection("detections must carry scores")
    kept = [d for d in detections if d.score >= score_threshold]
    return dice(rasterize(kept, shape), rasterize(ground_truth, shape))


def mean_detection_dice(per_slice: Sequence[tuple], score_threshold: float) -> float:
    """Mean over slices with non-empty truth of ``detection_dice``.

    ``per_slice`` holds ``(detections, truth_boxes, (H, W))`` triples.
    """
    vals = [detection_dice(d, g, score_threshold, s) for d, g, s in per_slice if len(g)]
    return float(np.mean(vals)) if vals else 0.0


# --------------------------------------------------------------- emission


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def curve_rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in rows:
        w.writerow([r["iteration"]] + [repr(float(r[c])) for c in CURVE_COLUMNS[1:]])
    return buf.getvalue()


def emit_report(report, path, format: str = "json") -> None:
    """Write an :class:`EvalReport` or a learning curve (list of row dicts)."""
    if format not in ("json", "csv"):
        raise ValueError("format must be json or csv")
    if isinstance(report, EvalReport):
        d = report.to_dict()
        if format == "json":
            _atomic_write(path, json.dumps(d, indent=2) + "\n")
        else:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(REPORT_KEYS)
            w.writerow([json.dumps(d[k]) for k in REPORT_KEYS])
            _atomic_write(path, buf.getvalue())
        return
    rows = list(report)
    if format == "csv":
        _atomic_write(path, curve_rows_to_csv(rows))
    else:
        _atomic_write(path, json.dumps([{c: r[c] for c in CURVE_COLUMNS} for r in rows], indent=2) + "\n")


def load_report(path) -> EvalReport:
    with open(path) as fh:
        return EvalReport.from_dict(json.load(fh))


def load_curve_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CURVE_COLUMNS:
            raise ValueError(f"curve CSV header must be {','.join(CURVE_COLUMNS)}")
        return [{"iteration": int(r[0]), "train_loss": float(r[1]), "test_loss": float(r[2]),
                 "test_accuracy": float(r[3])} for r in reader]
