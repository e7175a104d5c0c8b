"""Embedding networks with a shared backbone, a feature head and a PAD head.

A model maps a batch of grayscale patches to an embedding (the feature used
by every loss and verification protocol) and to a single spoof logit per
sample. Teachers for the distillation pipelines are produced by cloning a
trained model and freezing it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamStore


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture description: conv stem then MLP, plus the two heads."""

    input_shape: tuple = (32, 32)
    conv_stem: tuple = ()          # ((kernel_size, channels), ...)
    mlp_widths: tuple = (64,)
    feature_dim: int = 32
    preset_name: str = "custom"

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ModelError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if any(w < 1 for w in self.mlp_widths):
            raise ModelError(f"mlp widths must be >= 1, got {self.mlp_widths}")

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "conv_stem": [list(p) for p in self.conv_stem],
            "mlp_widths": list(self.mlp_widths),
            "feature_dim": self.feature_dim,
            "preset_name": self.preset_name,
        }

    @staticmethod
    def from_dict(d):
        return BackboneSpec(
            input_shape=tuple(d["input_shape"]),
            conv_stem=tuple(tuple(p) for p in d["conv_stem"]),
            mlp_widths=tuple(d["mlp_widths"]),
            feature_dim=int(d["feature_dim"]),
            preset_name=d["preset_name"],
        )


# Desk-scale stand-ins for the three full-size backbones of the experiments;
# parameter counts order small < medium < large.
_PRESETS = {
    "small": dict(conv_stem=(), mlp_widths=(64,)),
    "medium": dict(conv_stem=((3, 4),), mlp_widths=(128, 64)),
    "large": dict(conv_stem=((3, 8),), mlp_widths=(256, 128)),
}


def preset(name, feature_dim=32, input_shape=(32, 32)):
    if name not in _PRESETS:
        raise ModelError(f"unknown preset '{name}' (choose from {sorted(_PRESETS)})")
    cfg = _PRESETS[name]
    return BackboneSpec(
        input_shape=tuple(input_shape),
        conv_stem=cfg["conv_stem"],
        mlp_widths=cfg["mlp_widths"],
        feature_dim=feature_dim,
        preset_name=name,
    )


@dataclass
class ModelSnapshot:
    """Serialized model: spec, flat parameter blob and creation metadata."""

    spec: BackboneSpec
    param_names: list
    param_shapes: list
    blob: bytes
    strategy: str = ""
    epoch: int = 0
    seed: int = 0


class EmbeddingModel:
    """Backbone + feature head + PAD head over one ParamStore."""

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params

    @property
    def frozen(self):
        return self.params.frozen

    @classmethod
    def build(cls, spec, seed):
        """Initialize all layers uniformly in +-1/sqrt(fan_in), seeded."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
        params = ParamStore()

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        channels = 1
        h, w = spec.input_shape
        for i, (k, out_c) in enumerate(spec.conv_stem):
            fan_in = channels * k * k
            params.add(f"conv{i}_w", uniform((out_c, channels, k, k), fan_in))
            params.add(f"conv{i}_b", uniform((out_c,), fan_in))
            channels = out_c
            h, w = h - k + 1, w - k + 1
        dim = channels * h * w
        for i, width in enumerate(spec.mlp_widths):
            params.add(f"mlp{i}_w", uniform((dim, width), dim))
            params.add(f"mlp{i}_b", uniform((width,), dim))
            dim = width
        params.add("feat_w", uniform((dim, spec.feature_dim), dim))
        params.add("feat_b", uniform((spec.feature_dim,), dim))
        params.add("pad_w", uniform((spec.feature_dim,), spec.feature_dim))
        params.add("pad_b", uniform((), spec.feature_dim))
        return cls(spec, params)

    def _check_batch(self, batch):
        arr = np.asarray(batch, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3 or arr.shape[1:] != tuple(self.spec.input_shape):
            raise ModelError(
                f"batch shape {np.asarray(batch).shape} does not match "
                f"input_shape {self.spec.input_shape}"
            )
        if arr.shape[0] == 0:
            raise ModelError("empty batch")
        return arr

    def forward_all(self, batch):
        """One trunk pass returning (features (N,d), pad logits (N,))."""
        arr = self._check_batch(batch)
        n = arr.shape[0]
        p = self.params
        if self.spec.conv_stem:
            h = Tensor(arr[:, None, :, :])
            for i in range(len(self.spec.conv_stem)):
                h = ad.relu(ad.conv2d(h, p[f"conv{i}_w"], p[f"conv{i}_b"]))
            h = ad.reshape(h, (n, h.values[0].size))
        else:
            h = Tensor(arr.reshape(n, -1))
        for i in range(len(self.spec.mlp_widths)):
            h = ad.relu(ad.add(ad.matmul(h, p[f"mlp{i}_w"]), p[f"mlp{i}_b"]))
        features = ad.add(ad.matmul(h, p["feat_w"]), p["feat_b"])
        logits = ad.add(ad.matmul(features, p["pad_w"]), p["pad_b"])
        return features, logits

    def forward_features(self, batch):
        """Penultimate-layer embeddings, one row per patch."""
        return self.forward_all(batch)[0]

    def forward_pad_logit(self, batch):
        """Per-sample spoof logit and its logistic spoof probability."""
        logits = self.forward_all(batch)[1]
        return logits, ad.logistic(logits.values)

    def freeze(self):
        self.params.freeze()

    def snapshot(self, strategy="", epoch=0, seed=0):
        names = self.params.names()
        shapes = [list(self.params[n].values.shape) for n in names]
        blob = b"".join(
            np.ascontiguousarray(self.params[n].values, dtype="<f8").tobytes()
            for n in names
        )
        return ModelSnapshot(self.spec, names, shapes, blob, strategy, epoch, seed)


def clone_init(teacher):
    """Trainable copy of a model: same spec and values, independent storage."""
    return EmbeddingModel(teacher.spec, teacher.params.clone())


def freeze(model):
    model.freeze()


def save_snapshot(model, directory, strategy, seed, epoch=0):
    """Write `<strategy>_<seed>.model.json` + `.model.bin` under directory."""
    import os

    snap = model.snapshot(strategy=strategy, epoch=epoch, seed=seed)
    stem = f"{strategy}_{seed}.model"
    manifest = {
        "spec": snap.spec.to_dict(),
        "strategy": snap.strategy,
        "epoch": snap.epoch,
        "seed": snap.seed,
        "param_names": snap.param_names,
        "param_shapes": snap.param_shapes,
        "dtype": "<f8",
    }
    json_path = os.path.join(directory, stem + ".json")
    bin_path = os.path.join(directory, stem + ".bin")
    with open(json_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(bin_path, "wb") as f:
        f.write(snap.blob)
    return json_path, bin_path


def load_snapshot(json_path):
    """Rebuild a model from a snapshot manifest; bit-exact round trip."""
    with open(json_path) as f:
        manifest = json.load(f)
    spec = BackboneSpec.from_dict(manifest["spec"])
    bin_path = json_path[: -len(".json")] + ".bin"
    flat = np.fromfile(bin_path, dtype="<f8").astype(np.float64)
    params = ParamStore()
    offset = 0
    for name, shape in zip(manifest["param_names"], manifest["param_shapes"]):
        size = int(np.prod(shape)) if shape else 1
        params.add(name, flat[offset : offset + size].reshape(tuple(shape)))
        offset += size
    if offset != flat.size:
        raise ModelError(
            f"snapshot blob size mismatch: expected {offset} values, got {flat.size}"
        )
    model = EmbeddingModel(spec, params)
    meta = {
        "strategy": manifest["strategy"],
        "epoch": manifest["epoch"],
        "seed": manifest["seed"],
    }
    return model, meta
