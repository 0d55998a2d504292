"""Desk-scale classification and detection networks, SGD, and checkpoints.

Classifier::

    conv -> relu -> l2-pool(2, 2) -> [residual -> relu] -> conv/2 -> relu
         -> [residual -> relu] -> global l2-pool -> dense -> 5 logits

Detector::

    conv1_1 -> relu -> conv1_2 -> relu -> l2-pool(2, 2) -> conv2_1 -> relu
         -> conv2_2 -> relu -> pyramid pool per proposal -> dense -> relu
         -> {class scores, box deltas}

``pooling="max"`` swaps every l2 pooling stage (including the pyramid) for
max pooling; it is the ablation baseline.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from typing import Sequence

import numpy as np

from .errors import CheckpointMismatch, ShapeMismatch
from .l2pool import L2PoolConfig, global_l2_pool, l2_pool_forward
from .layers import (
    ConvLayer,
    DenseLayer,
    ResidualBlock,
    conv2d,
    dense,
    global_max_pool,
    max_pool,
    residual_forward,
)
from .pyramid import PyramidSpec, pyramid_pool_regions
from .tensor import Tensor, affine, concat, format_tensor, parse_tensor, relu


def _pool(x: Tensor, pooling: str, l2cfg: L2PoolConfig) -> Tensor:
    if pooling == "l2":
        return l2_pool_forward(x, l2cfg)
    return max_pool(x, l2cfg.filter_size, l2cfg.stride)


class Model:
    kind = "model"

    def __init__(self, hyper: dict):
        self.hyper = dict(hyper)

    def layers(self) -> list:
        """``(prefix, layer)`` pairs in a fixed order."""
        raise NotImplementedError

    def params(self) -> dict:
        out = {}
        for prefix, layer in self.layers():
            for name, t in layer.params().items():
                out[f"{prefix}.{name}"] = t
        return out

    def set_params(self, values: dict) -> None:
        for prefix, layer in self.layers():
            if isinstance(layer, ResidualBlock):
                for i, conv in enumerate(layer.body):
                    conv.weights = values[f"{prefix}.body{i}.weights"]
                    conv.bias = values[f"{prefix}.body{i}.bias"]
            else:
                layer.weights = values[f"{prefix}.weights"]
                layer.bias = values[f"{prefix}.bias"]


class ClassifierNet(Model):
    kind = "classifier"

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (8, 16), n_classes: int = 5,
                 pooling: str = "l2", residual_variant: str = "dense", gradient_mode: str = "analytic",
                 normalized: bool = False, seed: int = 0, input_mean: float = 0.0, input_std: float = 1.0):
        super().__init__(dict(in_channels=in_channels, channels=list(channels), n_classes=n_classes,
                              pooling=pooling, residual_variant=residual_variant,
                              gradient_mode=gradient_mode, normalized=normalized, seed=seed,
                              input_mean=input_mean, input_std=input_std))
        rng = np.random.default_rng(seed)
        c1, c2 = channels
        self.conv1 = ConvLayer.init(in_channels, c1, 3, rng)
        self.block1 = ResidualBlock.init(c1, rng, residual_variant)
        self.conv2 = ConvLayer.init(c1, c2, 3, rng, stride=2)
        self.block2 = ResidualBlock.init(c2, rng, residual_variant)
        self.fc = DenseLayer.init(c2, n_classes, rng, gain=1.0)
        self.pooling = pooling
        self.l2cfg = L2PoolConfig(2, 2, normalized, gradient_mode)
        # the global stage is the root-mean-square form so its scale does not grow with the plane
        self.global_cfg = L2PoolConfig(2, 2, True, gradient_mode)
        # fixed input standardization, usually set from training pixels
        self.input_mean = float(input_mean)
        self.input_std = float(input_std)

    def layers(self):
        return [("conv1", self.conv1), ("block1", self.block1), ("conv2", self.conv2),
                ("block2", self.block2), ("fc", self.fc)]

    def pooled(self, x: Tensor) -> Tensor:
        """``[N, C, H, W]`` images to the ``[N, C2]`` vector fed to the dense layer."""
        h = affine(x, 1.0 / self.input_std, -self.input_mean / self.input_std)
        h = relu(conv2d(h, self.conv1))
        h = _pool(h, self.pooling, self.l2cfg)
        h = relu(residual_forward(h, self.block1))
        h = relu(conv2d(h, self.conv2))
        h = relu(residual_forward(h, self.block2))
        return global_l2_pool(h, self.global_cfg) if self.pooling == "l2" else global_max_pool(h)

    def forward(self, x: Tensor) -> Tensor:
        """``[N, C, H, W]`` images to ``[N, n_classes]`` logits."""
        return dense(self.pooled(x), self.fc)

    def calibrate_head(self, x: Tensor) -> None:
        """Rescale the dense layer so its inputs look standardized on ``x``.

        Globally pooled features have a large shared mean and a small spread
        across images; without this the head barely reacts to the spread and
        training stalls at the class prior.
        """
        f = self.pooled(x).data
        mu, sd = f.mean(axis=0), f.std(axis=0) + 1e-3
        w = self.fc.weights.data / sd[:, None]
        self.fc = DenseLayer(Tensor(w, True), Tensor(self.fc.bias.data - mu @ w, True))


class DetectorNet(Model):
    kind = "detector"

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (8, 16), hidden: int = 64,
                 n_classes: int = 2, levels: Sequence[int] = (4, 2, 1), pooling: str = "l2",
                 gradient_mode: str = "analytic", normalized: bool = False, seed: int = 0,
                 input_mean: float = 0.0, input_std: float = 1.0):
        super().__init__(dict(in_channels=in_channels, channels=list(channels), hidden=hidden,
                              n_classes=n_classes, levels=list(levels), pooling=pooling,
                              gradient_mode=gradient_mode, normalized=normalized, seed=seed,
                              input_mean=input_mean, input_std=input_std))
        rng = np.random.default_rng(seed)
        c1, c2 = channels
        self.conv1_1 = ConvLayer.init(in_channels, c1, 3, rng)
        self.conv1_2 = ConvLayer.init(c1, c1, 3, rng)
        self.conv2_1 = ConvLayer.init(c1, c2, 3, rng)
        self.conv2_2 = ConvLayer.init(c2, c2, 3, rng)
        self.spec = PyramidSpec(tuple(levels), pooling)
        self.fc = DenseLayer.init(self.spec.output_length(c2), hidden, rng)
        self.cls_head = DenseLayer.init(hidden, n_classes, rng, gain=0.1)
        self.bbox_head = DenseLayer.init(hidden, 4, rng, gain=0.01)
        self.pooling = pooling
        self.l2cfg = L2PoolConfig(2, 2, normalized, gradient_mode)
        self.feature_stride = 2
        self.input_mean = float(input_mean)
        self.input_std = float(input_std)

    def layers(self):
        return [("conv1_1", self.conv1_1), ("conv1_2", self.conv1_2), ("conv2_1", self.conv2_1),
                ("conv2_2", self.conv2_2), ("fc", self.fc), ("cls_head", self.cls_head),
                ("bbox_head", self.bbox_head)]

    def features(self, x: Tensor) -> Tensor:
        h = affine(x, 1.0 / self.input_std, -self.input_mean / self.input_std)
        h = relu(conv2d(h, self.conv1_1))
        h = relu(conv2d(h, self.conv1_2))
        h = _pool(h, self.pooling, self.l2cfg)
        h = relu(conv2d(h, self.conv2_1))
        return relu(conv2d(h, self.conv2_2))

    def heads(self, feature_maps: Sequence[Tensor], regions: Sequence[Sequence]) -> tuple:
        """Pool feature-space ``regions[i]`` from ``feature_maps[i]`` and run both heads."""
        pooled = [pyramid_pool_regions(f, r, self.spec) for f, r in zip(feature_maps, regions) if len(r)]
        if not pooled:
            raise ShapeMismatch("no regions to score")
        v = pooled[0] if len(pooled) == 1 else concat(pooled, axis=0)
        h = relu(dense(v, self.fc))
        return dense(h, self.cls_head), dense(h, self.bbox_head)


MODEL_KINDS = {"classifier": ClassifierNet, "detector": DetectorNet}


class SGD:
    """Momentum SGD: ``v = mu * v - lr * (g + wd * p); p = p + v``."""

    def __init__(self, model: Model, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros(t.shape) for k, t in model.params().items()}

    def step(self, grads: dict) -> None:
        new = {}
        for name, p in self.model.params().items():
            g = grads.get(p.id)
            v = self.velocity[name]
            gd = (g.data if g is not None else 0.0) + self.weight_decay * p.data
            v *= self.momentum
            v -= self.lr * gd
            new[name] = Tensor._wrap(p.data + v, True)
        self.model.set_params(new)


# ------------------------------------------------------------- checkpoint


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Directory with ``manifest.json`` and one tensor text file per parameter.

    Written to a temporary sibling and renamed into place.
    """
    path = os.fspath(path)
    tmp = path + ".tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    os.makedirs(os.path.join(tmp, "params"))
    entries = []
    for name, t in model.params().items():
        text = format_tensor(t)
        fname = f"params/{name}.txt"
        with open(os.path.join(tmp, fname), "w") as fh:
            fh.write(text)
        entries.append({"name": name, "shape": list(t.shape), "file": fname, "sha256": _sha(text)})
    manifest = {
        "format": "l2lesion-checkpoint-1",
        "kind": model.kind,
        "layers": [{"name": p, "type": type(l).__name__} for p, l in model.layers()],
        "hyperparameters": model.hyper,
        "params": entries,
        "extra": extra or {},
    }
    with open(os.path.join(tmp, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    old = path + ".old"
    if os.path.exists(path):
        shutil.rmtree(old, ignore_errors=True)
        os.replace(path, old)
    os.replace(tmp, path)
    shutil.rmtree(old, ignore_errors=True)


def read_manifest(path) -> dict:
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CheckpointMismatch(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("format") != "l2lesion-checkpoint-1" or manifest.get("kind") not in MODEL_KINDS:
        raise CheckpointMismatch("not an l2lesion checkpoint")
    return manifest


def load_checkpoint(path) -> tuple:
    """``(model, manifest)``; any damaged or mismatched file raises CheckpointMismatch."""
    manifest = read_manifest(path)
    hyper = manifest["hyperparameters"]
    model = MODEL_KINDS[manifest["kind"]](**hyper)
    expected = model.params()
    if sorted(expected) != sorted(e["name"] for e in manifest["params"]):
        raise CheckpointMismatch("parameter names do not match the architecture")
    values = {}
    for e in manifest["params"]:
        try:
            with open(os.path.join(path, e["file"])) as fh:
                text = fh.read()
        except OSError as exc:
            raise CheckpointMismatch(f"missing parameter file {e['file']}") from exc
        if _sha(text) != e["sha256"]:
            raise CheckpointMismatch(f"parameter file {e['file']} is damaged")
        try:
            t = parse_tensor(text)
        except (ValueError, ShapeMismatch) as exc:
            raise CheckpointMismatch(f"bad tensor in {e['file']}: {exc}") from exc
        if list(t.shape) != e["shape"] or t.shape != expected[e["name"]].shape:
            raise CheckpointMismatch(f"shape mismatch for {e['name']}")
        values[e["name"]] = Tensor._wrap(t.data, True)
    model.set_params(values)
    return model, manifest
