"""Self-check of every artifact the CLI writes.

``check_path`` walks a file or directory and validates each recognized
artifact against its documented layout; unrecognized files are skipped.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

from .data import load_volume
from .dataset import sha256_file
from .errors import L2LesionError
from .metrics import CURVE_COLUMNS, REPORT_KEYS, EvalReport, load_curve_csv
from .models import load_checkpoint
from .proposals import CSV_HEADER
from .tensor import load_tensor

MODALITY_TABLE_HEADER = ("T1", "T1c", "T2", "F/D", "Dice")
POOLING_TABLE_HEADER = ("configuration", "pooling", "Dice")
STEPS_HEADER = ("step", "cls_loss", "bbox_loss", "total")
TABLE1_HEADER = ("Total MRI", "Accuracy", "Sensitivity", "Specificity", "Recall", "Kappa")


@dataclass
class CheckResult:
    path: str
    kind: str
    ok: bool
    message: str = ""


def _rows(path) -> tuple:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("empty CSV")
    return tuple(rows[0]), rows[1:]


def check_report(path) -> None:
    with open(path) as fh:
        d = json.load(fh)
    if list(d) != list(REPORT_KEYS):
        raise ValueError(f"report keys {list(d)} != {list(REPORT_KEYS)}")
    for k in ("accuracy", "sensitivity", "specificity", "recall"):
        if not 0.0 <= d[k] <= 1.0:
            raise ValueError(f"{k} outside [0, 1]")
    if not -1.0 <= d["kappa"] <= 1.0:
        raise ValueError("kappa outside [-1, 1]")
    if d["dice"] is not None and not 0.0 <= d["dice"] <= 1.0:
        raise ValueError("dice outside [0, 1]")
    if not isinstance(d["n_samples"], int) or d["n_samples"] < 0:
        raise ValueError("n_samples must be a non-negative integer")


def check_report_csv(path) -> None:
    header, rows = _rows(path)
    if header != REPORT_KEYS or len(rows) != 1:
        raise ValueError("report CSV needs the report keys as header and one row")
    d = {k: json.loads(v) for k, v in zip(header, rows[0])}
    EvalReport.from_dict(d)


def check_curve(path) -> None:
    rows = load_curve_csv(path)
    for r in rows:
        if not all(math.isfinite(r[c]) for c in CURVE_COLUMNS[1:]):
            raise ValueError("non-finite curve value")
    its = [r["iteration"] for r in rows]
    if its != sorted(its):
        raise ValueError("iterations must be non-decreasing")


def check_steps(path) -> None:
    header, rows = _rows(path)
    if header != STEPS_HEADER:
        raise ValueError(f"steps header must be {','.join(STEPS_HEADER)}")
    for r in rows:
        c, b, t = float(r[1]), float(r[2]), float(r[3])
        if c + b != t:
            raise ValueError(f"step {r[0]}: total != cls + bbox")


def check_modality_table(path) -> None:
    header, rows = _rows(path)
    if header != MODALITY_TABLE_HEADER:
        raise ValueError(f"modality table header must be {','.join(MODALITY_TABLE_HEADER)}")
    for r in rows:
        if any(f not in ("x", "-") for f in r[:4]) or "x" not in r[:4]:
            raise ValueError(f"bad flag row {r}")
        if not 0.0 <= float(r[4]) <= 100.0:
            raise ValueError("Dice must be a percentage")


def check_pooling_table(path) -> None:
    header, rows = _rows(path)
    if header != POOLING_TABLE_HEADER:
        raise ValueError(f"pooling table header must be {','.join(POOLING_TABLE_HEADER)}")
    if sorted(r[1] for r in rows) != ["l2", "max"]:
        raise ValueError("pooling table needs exactly one l2 row and one max row")
    for r in rows:
        if not 0.0 <= float(r[2]) <= 100.0:
            raise ValueError("Dice must be a percentage")


def check_table1(path) -> None:
    header, rows = _rows(path)
    if header != TABLE1_HEADER or len(rows) != 1:
        raise ValueError("table1 CSV needs the Table-1 header and one row")


def check_proposals(path) -> None:
    header, rows = _rows(path)
    if list(header) != CSV_HEADER:
        raise ValueError("proposal CSV header mismatch")
    for r in rows:
        x0, y0, x1, y1 = (int(v) for v in r[:4])
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"empty box {r[:4]}")


def check_gradcheck(path) -> None:
    with open(path) as fh:
        d = json.load(fh)
    for k in ("tolerance", "ok", "results"):
        if k not in d:
            raise ValueError(f"gradcheck report lacks {k!r}")
    for r in d["results"]:
        if r["status"] not in ("PASS", "FAIL", "EXPECTED FAIL", "UNEXPECTED PASS"):
            raise ValueError(f"bad status {r['status']!r}")


def check_dataset(path) -> None:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "l2lesion-dataset-1":
        raise ValueError("not an l2lesion dataset manifest")
    for rel, digest in manifest["checksums"].items():
        if sha256_file(os.path.join(path, rel)) != digest:
            raise ValueError(f"checksum mismatch for {rel}")


CHECKERS = {
    "report.json": ("report", check_report),
    "report.csv": ("report", check_report_csv),
    "curve.csv": ("curve", check_curve),
    "steps.csv": ("steps", check_steps),
    "modality_ablation.csv": ("modality-table", check_modality_table),
    "pooling_ablation.csv": ("pooling-table", check_pooling_table),
    "table1.csv": ("table1", check_table1),
    "gradcheck.json": ("gradcheck", check_gradcheck),
}


def _classify(path) -> tuple:
    name = os.path.basename(path)
    if os.path.isdir(path):
        if os.path.isfile(os.path.join(path, "manifest.json")):
            with open(os.path.join(path, "manifest.json")) as fh:
                fmt = json.load(fh).get("format")
            if fmt == "l2lesion-checkpoint-1":
                return "checkpoint", lambda p: load_checkpoint(p)
            if fmt == "l2lesion-dataset-1":
                return "dataset", check_dataset
        return None, None
    if name in CHECKERS:
        return CHECKERS[name]
    if name.endswith(".mvol"):
        return "mvol", lambda p: load_volume(p)
    if name.endswith("proposals.csv"):
        return "proposals", check_proposals
    if name.endswith(".tensor.txt"):
        return "tensor", lambda p: load_tensor(p)
    return None, None


def check_path(path) -> list:
    """Validate ``path`` and, for directories, everything below it."""
    out = []
    kind, fn = _classify(path)
    if kind is not None:
        try:
            fn(path)
            out.append(CheckResult(path, kind, True))
        except (L2LesionError, ValueError, KeyError, OSError) as exc:
            out.append(CheckResult(path, kind, False, str(exc)))
    if os.path.isdir(path) and kind != "checkpoint":
        for name in sorted(os.listdir(path)):
            out.extend(check_path(os.path.join(path, name)))
    return out
