"""On-disk dataset directories written by ``l2lesion synth``.

Layout::

    manifest.json          seed, generator settings, sha256 of every file
    volumes/<id>.mvol      one MVOL file per volume
    volumes.csv            volume_id,file,label
    classify_split.csv     volume_id,split        (train/test)
    detect_split.csv       volume_id,split        (train/val/test)
    slices.csv             volume_id,view,slice_index,label,lesion
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os

from .data import (
    MultiModalVolume,
    SynthConfig,
    _AXIS,
    lesion_mask,
    load_volume,
    save_volume,
    split_volumes,
)
from .errors import DatasetMissing, IoFailure

CLASSIFY_SPLITS = ("train", "test")
DETECT_SPLITS = ("train", "val", "test")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def split_assignment(vols, fractions, names, seed, classes=None) -> dict:
    pool = [i for i, v in enumerate(vols) if classes is None or v.label in classes]
    groups = split_volumes([vols[i].label for i in pool], fractions, seed)
    out = {}
    for name, g in zip(names, groups):
        for k in g:
            out[vols[pool[k]].volume_id] = name
    return out


def write_dataset(vols: list, out_dir, synth: SynthConfig | None = None,
                  classify_fractions=(0.8, 0.2), detect_fractions=(0.7, 0.1, 0.2),
                  detect_classes=(1, 2, 4), split_seed: int = 0) -> dict:
    """Write volumes plus index CSVs and a checksummed manifest; returns the manifest."""
    try:
        os.makedirs(os.path.join(out_dir, "volumes"), exist_ok=True)
        vol_rows, slice_rows = [], []
        for v in vols:
            fname = f"volumes/{v.volume_id}.mvol"
            save_volume(v, os.path.join(out_dir, fname))
            vol_rows.append((v.volume_id, fname, v.label))
            mask = lesion_mask(v)
            for view, axis in _AXIS.items():
                other = tuple(a for a in range(3) if a != axis)
                hit = mask.any(axis=other)
                for i in range(v.shape[axis]):
                    slice_rows.append((v.volume_id, view, i, v.label, int(hit[i])))
        _write_csv(os.path.join(out_dir, "volumes.csv"), ("volume_id", "file", "label"), vol_rows)
        cls_split = split_assignment(vols, classify_fractions, CLASSIFY_SPLITS, split_seed)
        _write_csv(os.path.join(out_dir, "classify_split.csv"), ("volume_id", "split"), sorted(cls_split.items()))
        det_split = split_assignment(vols, detect_fractions, DETECT_SPLITS, split_seed, set(detect_classes))
        _write_csv(os.path.join(out_dir, "detect_split.csv"), ("volume_id", "split"), sorted(det_split.items()))
        _write_csv(os.path.join(out_dir, "slices.csv"),
                   ("volume_id", "view", "slice_index", "label", "lesion"), slice_rows)
        files = sorted(["volumes.csv", "classify_split.csv", "detect_split.csv", "slices.csv"]
                       + [r[1] for r in vol_rows])
        manifest = {
            "format": "l2lesion-dataset-1",
            "seed": synth.seed if synth else None,
            "synth": dataclasses.asdict(synth) if synth else None,
            "split_seed": split_seed,
            "checksums": {f: sha256_file(os.path.join(out_dir, f)) for f in files},
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest


def _read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_dataset(path) -> tuple:
    """``(volumes, classify_split, detect_split)``; splits map volume_id -> split name."""
    index = os.path.join(path, "volumes.csv")
    if not os.path.isfile(index):
        raise DatasetMissing(f"no dataset at {path} (volumes.csv missing)")
    vols: list[MultiModalVolume] = []
    for row in _read_csv(index):
        vols.append(load_volume(os.path.join(path, row["file"]), row["volume_id"]))
    cls_split = {r["volume_id"]: r["split"] for r in _read_csv(os.path.join(path, "classify_split.csv"))}
    det_split = {r["volume_id"]: r["split"] for r in _read_csv(os.path.join(path, "detect_split.csv"))}
    return vols, cls_split, det_split
