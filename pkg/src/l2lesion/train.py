"""Training and evaluation loops for the classifier and the detector.

Both loops are single-threaded and fully determined by the run config: the
model init, batch order and ROI sampling all draw from ``cfg.seed``.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import augment, balance_classes, extract_slices, generate_synthetic_dataset
from .dataset import CLASSIFY_SPLITS, DETECT_SPLITS, read_dataset, split_assignment
from .errors import DatasetMissing, DivergedLoss
from .layers import detection_loss, multiclass_hinge, smooth_l1_bbox, softmax_cross_entropy
from .metrics import EvalReport, confusion, derive_metrics, emit_report, mean_detection_dice
from .models import SGD, ClassifierNet, DetectorNet, save_checkpoint
from .proposals import ProposalConfig, decode_box, generate_proposals, label_proposals, nms
from .pyramid import map_proposal_to_feature
from .tensor import GradTape, Tensor, index, take_rows

log = logging.getLogger(__name__)

N_CLASSES = 5
CALIBRATION_IMAGES = 64


# ---------------------------------------------------------------- dataset


def load_dataset(cfg: RunConfig) -> tuple:
    """``(volumes, classify_split, detect_split)`` from ``cfg.dataset`` or the synthetic generator."""
    if cfg.dataset:
        return read_dataset(cfg.dataset)
    vols = generate_synthetic_dataset(cfg.synth_config())
    cls_split = split_assignment(vols, cfg.split, CLASSIFY_SPLITS, cfg.synth_seed)
    det_split = split_assignment(vols, cfg.detect_split, DETECT_SPLITS, cfg.synth_seed, set(cfg.detect_classes))
    return vols, cls_split, det_split


def _slices(vols, split: dict, name: str, cfg: RunConfig) -> list:
    out = []
    for v in vols:
        if split.get(v.volume_id) != name:
            continue
        for view in cfg.views:
            out.extend(extract_slices(v, view, cfg.lesion_only, cfg.modalities, cfg.fallback_map))
    return out


def _batches(items: list, batch_size: int, rng: np.random.Generator | None) -> list:
    """Shape-homogeneous batches; shuffled when ``rng`` is given."""
    order = list(range(len(items))) if rng is None else [int(i) for i in rng.permutation(len(items))]
    groups: dict = {}
    for i in order:
        groups.setdefault(items[i].image.shape, []).append(i)
    out = []
    for shape in sorted(groups):
        idx = groups[shape]
        out.extend(idx[k:k + batch_size] for k in range(0, len(idx), batch_size))
    if rng is not None:
        out = [out[int(k)] for k in rng.permutation(len(out))]
    return out


def _stack(items, idx) -> Tensor:
    return Tensor(np.stack([items[i].image.data for i in idx]))


def _lr(cfg: RunConfig, epoch: int) -> float:
    if cfg.lr_step <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * cfg.lr_gamma ** (epoch // cfg.lr_step)


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise DivergedLoss(f"loss became {value} at {where}; no checkpoint written")


# --------------------------------------------------------- classification


def _pixel_stats(samples: list | None) -> tuple:
    if not samples:
        return 0.0, 1.0
    pixels = np.concatenate([s.image.data.ravel() for s in samples])
    return float(pixels.mean()), float(pixels.std()) or 1.0


def build_classifier(cfg: RunConfig, train: list | None = None) -> ClassifierNet:
    """Fresh classifier; with ``train`` slices the input scaling and head are fitted to them."""
    mean, std = _pixel_stats(train)
    model = ClassifierNet(len(cfg.modalities), cfg.channels, N_CLASSES, cfg.pooling, cfg.residual_variant,
                          cfg.gradient_mode, cfg.normalized, cfg.seed, mean, std)
    if train:
        # one view's shape only, so the images stack
        same = [i for i, s in enumerate(train) if s.image.shape == train[0].image.shape]
        step = max(1, len(same) // CALIBRATION_IMAGES)
        model.calibrate_head(_stack(train, same[::step]))
    return model


def predict_classes(model: ClassifierNet, slices: list, batch_size: int = 32) -> tuple:
    """``(predictions, mean cross-entropy)`` over ``slices`` in a fixed order."""
    preds = np.zeros(len(slices), dtype=np.int64)
    total = 0.0
    for idx in _batches(slices, batch_size, None):
        logits = model.forward(_stack(slices, idx))
        labels = [slices[i].label for i in idx]
        total += float(softmax_cross_entropy(logits, labels).data) * len(idx)
        preds[idx] = np.argmax(logits.data, axis=1)
    return preds, total / max(len(slices), 1)


def evaluate_classifier(model: ClassifierNet, slices: list) -> EvalReport:
    preds, _ = predict_classes(model, slices)
    return derive_metrics(confusion(preds, [s.label for s in slices], N_CLASSES))


@dataclass
class TrainResult:
    model: object
    report: EvalReport
    curve: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # detection: per-step loss triples


def train_classifier(cfg: RunConfig, data: tuple | None = None, out_dir=None) -> TrainResult:
    """Train on the ``train`` split, evaluate on ``test`` after every epoch."""
    vols, cls_split, _ = data if data is not None else load_dataset(cfg)
    train = _slices(vols, cls_split, "train", cfg)
    if cfg.balance:
        train = balance_classes(train, cfg.seed)
    train = [a for s in train for a in augment(s, cfg.augment)]
    test = _slices(vols, cls_split, "test", cfg)
    if not train or not test:
        raise DatasetMissing("classification split is empty")
    model = build_classifier(cfg, train)
    opt = SGD(model, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    curve, step = [], 0
    for epoch in range(cfg.epochs):
        opt.lr = _lr(cfg, epoch)
        running, seen = 0.0, 0
        for idx in _batches(train, cfg.batch_size, rng):
            with GradTape() as tape:
                logits = model.forward(_stack(train, idx))
                loss = softmax_cross_entropy(logits, [train[i].label for i in idx])
            value = float(loss.data)
            _check_finite(value, f"epoch {epoch} step {step}")
            params = list(model.params().values())
            grads = tape.gradient(loss, params)
            opt.step({p.id: g for p, g in zip(params, grads)})
            running += value * len(idx)
            seen += len(idx)
            step += 1
        preds, test_loss = predict_classes(model, test)
        acc = float(np.mean(preds == np.array([s.label for s in test])))
        curve.append({"iteration": step, "train_loss": running / seen, "test_loss": test_loss,
                      "test_accuracy": acc})
        log.info("epoch %d: train %.4f test %.4f acc %.4f", epoch, running / seen, test_loss, acc)
    report = evaluate_classifier(model, test)
    if out_dir is not None:
        _save_outputs(out_dir, model, cfg, report, curve)
    return TrainResult(model, report, curve)


def _save_outputs(out_dir, model, cfg: RunConfig, report: EvalReport, curve: list, steps=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(model, os.path.join(out_dir, "checkpoint"), {"config": cfg.to_text()})
    emit_report(curve, os.path.join(out_dir, "curve.csv"), "csv")
    emit_report(report, os.path.join(out_dir, "report.json"), "json")
    if steps is not None:
        with open(os.path.join(out_dir, "steps.csv"), "w") as fh:
            fh.write("step,cls_loss,bbox_loss,total\n")
            for i, (c, b, t) in enumerate(steps):
                fh.write(f"{i},{c!r},{b!r},{t!r}\n")


# -------------------------------------------------------------- detection


@dataclass
class DetSample:
    image: Tensor
    gt: list  # (RegionProposal, 1)
    proposals: list
    labeled: list  # LabeledProposal, training samples only
    source: tuple


def build_detector(cfg: RunConfig, train: list | None = None) -> DetectorNet:
    """Fresh detector; with ``train`` samples the input scaling is fitted to them."""
    mean, std = _pixel_stats(train)
    return DetectorNet(len(cfg.modalities), cfg.channels, cfg.hidden, 2, cfg.pyramid_levels, cfg.pooling,
                       cfg.gradient_mode, cfg.normalized, cfg.seed, mean, std)


def _proposal_cfg(cfg: RunConfig) -> ProposalConfig:
    return ProposalConfig(max_proposals=cfg.max_proposals, seed=cfg.seed)


def detection_samples(vols, split: dict, name: str, cfg: RunConfig, train: bool = False) -> list:
    """Lesion slices of the named split with cached proposals; lesions collapse to class 1."""
    pcfg = _proposal_cfg(cfg)
    out = []
    for v in vols:
        if split.get(v.volume_id) != name:
            continue
        for view in cfg.views:
            slices = extract_slices(v, view, True, cfg.modalities, cfg.fallback_map)
            if train:
                slices = [a for s in slices for a in augment(s, cfg.augment)]
            for s in slices:
                gt = [(b, 1) for b, c in s.boxes if c in cfg.detect_classes]
                if not gt:
                    continue
                props = generate_proposals(s.image, pcfg)
                labeled = []
                if train:
                    # ground-truth boxes join the pool so every image has a positive
                    labeled = label_proposals(props + [b for b, _ in gt], gt, cfg.fg_threshold, cfg.bg_upper)
                out.append(DetSample(s.image, gt, props, labeled, s.source))
    return out


def sample_rois(labeled: list, cfg: RunConfig, rng: np.random.Generator) -> list:
    """At most ``fg_fraction`` foreground, the rest background, ``rois_per_image`` total."""
    fg = [p for p in labeled if p.cls > 0]
    bg = [p for p in labeled if p.cls == 0]
    n_fg = min(len(fg), int(round(cfg.fg_fraction * cfg.rois_per_image)))
    n_bg = min(len(bg), cfg.rois_per_image - n_fg)
    pick_fg = [fg[int(i)] for i in np.sort(rng.choice(len(fg), n_fg, replace=False))] if n_fg else []
    pick_bg = [bg[int(i)] for i in np.sort(rng.choice(len(bg), n_bg, replace=False))] if n_bg else []
    return pick_fg + pick_bg


def _regions(proposals, image_shape, feature_shape) -> list:
    out = []
    for p in proposals:
        r = map_proposal_to_feature(p, image_shape, feature_shape)
        out.append((r.x0, r.y0, r.x1, r.y1))
    return out


def detect(model: DetectorNet, sample: DetSample, cfg: RunConfig) -> list:
    """Scored, decoded, thresholded and suppressed detections for one slice."""
    img = sample.image
    fmap = model.features(Tensor(img.data[None]))
    feat = index(fmap, 0)
    H, W = img.shape[-2:]
    regions = _regions(sample.proposals, (H, W), feat.shape[-2:])
    scores, deltas = model.heads([feat], [regions])
    fg_score = scores.data[:, 1] - scores.data[:, 0]
    dets = []
    for p, s, d in zip(sample.proposals, fg_score, deltas.data):
        if s >= cfg.score_threshold:
            dets.append(decode_box(p, d, H, W, float(s)))
    return nms(dets, cfg.nms_iou)


def evaluate_detector(model: DetectorNet, samples: list, cfg: RunConfig) -> float:
    per_slice = []
    for s in samples:
        H, W = s.image.shape[-2:]
        per_slice.append((detect(model, s, cfg), [b for b, _ in s.gt], (H, W)))
    return mean_detection_dice(per_slice, cfg.score_threshold)


def _dice_report(value: float, n: int) -> EvalReport:
    return EvalReport(accuracy=0.0, sensitivity=0.0, specificity=0.0, recall=0.0, kappa=0.0,
                      dice=float(value), n_samples=n)


def train_detector(cfg: RunConfig, data: tuple | None = None, out_dir=None) -> TrainResult:
    """Train the two-head detector; curve rows carry validation Dice in ``test_accuracy``."""
    vols, _, det_split = data if data is not None else load_dataset(cfg)
    train = detection_samples(vols, det_split, "train", cfg, train=True)
    val = detection_samples(vols, det_split, "val", cfg)
    test = detection_samples(vols, det_split, "test", cfg)
    if not train:
        raise DatasetMissing("detection training split has no lesion slices")
    model = build_detector(cfg, train)
    opt = SGD(model, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    curve, steps = [], []
    for epoch in range(cfg.epochs):
        opt.lr = _lr(cfg, epoch)
        running, seen = 0.0, 0
        for idx in _batches(train, cfg.batch_size, rng):
            rois = [sample_rois(train[i].labeled, cfg, rng) for i in idx]
            if not any(p.cls > 0 for r in rois for p in r):
                log.warning("batch without foreground proposals skipped")
                continue
            with GradTape() as tape:
                fmap = model.features(_stack(train, idx))
                feats, regions = [], []
                for k, i in enumerate(idx):
                    f = index(fmap, k)
                    feats.append(f)
                    regions.append(_regions([p.proposal for p in rois[k]], train[i].image.shape[-2:], f.shape[-2:]))
                scores, deltas = model.heads(feats, regions)
                flat = [p for r in rois for p in r]
                cls_loss = multiclass_hinge(scores, [min(p.cls, 1) for p in flat], cfg.hinge_margin)
                fg_rows = [j for j, p in enumerate(flat) if p.cls > 0]
                target = Tensor(np.array([flat[j].regression_target for j in fg_rows], dtype=np.float64))
                bbox_loss = smooth_l1_bbox(take_rows(deltas, fg_rows), target, cfg.smooth_l1_beta)
                bundle = detection_loss(cls_loss, bbox_loss, cfg.cls_weight, cfg.bbox_weight)
            c, b, t = float(bundle.cls_loss.data), float(bundle.bbox_loss.data), float(bundle.total.data)
            _check_finite(t, f"epoch {epoch} step {len(steps)}")
            steps.append((c, b, t))
            params = list(model.params().values())
            grads = tape.gradient(bundle.total, params)
            opt.step({p.id: g for p, g in zip(params, grads)})
            running += t
            seen += 1
        val_dice = evaluate_detector(model, val, cfg) if val else 0.0
        curve.append({"iteration": len(steps), "train_loss": running / max(seen, 1),
                      "test_loss": 0.0, "test_accuracy": val_dice})
        log.info("epoch %d: loss %.4f val dice %.4f", epoch, running / max(seen, 1), val_dice)
    report = _dice_report(evaluate_detector(model, test, cfg) if test else 0.0, len(test))
    if out_dir is not None:
        _save_outputs(out_dir, model, cfg, report, curve, steps)
    return TrainResult(model, report, curve, steps)


# ------------------------------------------------------------------- eval


def eval_checkpoint(model, cfg: RunConfig, split: str, data: tuple | None = None) -> EvalReport:
    vols, cls_split, det_split = data if data is not None else load_dataset(cfg)
    if isinstance(model, DetectorNet):
        samples = detection_samples(vols, det_split, split, cfg)
        return _dice_report(evaluate_detector(model, samples, cfg) if samples else 0.0, len(samples))
    return evaluate_classifier(model, _slices(vols, cls_split, split, cfg))


__all__ = [
    "DetSample", "TrainResult", "build_classifier", "build_detector", "detect", "detection_samples",
    "eval_checkpoint", "evaluate_classifier", "evaluate_detector", "load_dataset", "predict_classes",
    "sample_rois", "train_classifier", "train_detector",
]
