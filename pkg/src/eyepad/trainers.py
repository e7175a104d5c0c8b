"""The six training strategies: EA-only, PAD-only, MTL, MTMT, the two-step
distillation pipeline and its MTL+distillation refinement.

Every run is fully determined by (config, data): model init and each batch
stream draw from named sub-seeds of the config seed, so strategies that
must coincide under zero distillation weight (the reduction identities)
share the exact same streams.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .models import EmbeddingModel, clone_init, preset
from .optim import ensure_grads, lr_decay, optimizer_step


class TrainError(Exception):
    pass


STRATEGIES = ("ea_only", "pad_only", "mtl", "mtmt", "eyepad", "eyepadpp")


@dataclass
class TrainConfig:
    strategy: str = "eyepad"
    epochs: int = 30
    batch_size: int = 64
    samples_per_class: int = 4
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    optimizer: str = "adaptive"
    lr: float = 1e-3
    gamma: float = 0.5
    decay_after: int = 12
    seed: int = 0
    preset: str = "medium"
    feature_dim: int = 32
    degradation: str = "clean"

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 8:
            raise TrainError(f"batch_size must be >= 8, got {self.batch_size}")
        if self.batch_size % self.samples_per_class != 0:
            raise TrainError(
                f"batch_size {self.batch_size} not divisible by "
                f"samples_per_class {self.samples_per_class}"
            )
        if self.strategy not in STRATEGIES:
            raise TrainError(f"unknown strategy '{self.strategy}'")


@dataclass
class TrainLog:
    """Per-iteration records: (epoch, iter, task, loss, loss_task, loss_dis, lr)."""

    rows: list = field(default_factory=list)

    def append(self, epoch, it, task, loss, loss_task, loss_dis, lr):
        self.rows.append((epoch, it, task, loss, loss_task, loss_dis, lr))

    def tasks(self):
        return [r[2] for r in self.rows]

    def losses(self):
        return [r[3] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "iter", "task", "loss", "loss_task",
                            "loss_dis", "lr"])
            for row in self.rows:
                writer.writerow([row[0], row[1], row[2],
                                 repr(row[3]), repr(row[4]), repr(row[5]),
                                 repr(row[6])])


def derive_rng(seed, label):
    """Deterministic per-purpose generator: seed + a stable label hash."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(label.encode())])
    )


def derive_seed(seed, label):
    """A plain integer sub-seed (for model init)."""
    return (int(seed) << 16) ^ zlib.crc32(label.encode())


# Desk-scale proxies for the three full-size backbones keep the published
# per-backbone hyperparameter tables addressable.
_PRESET_WEIGHTS = {
    # (preset, degradation): (lambda1, lambda2, lambda_auth, lambda_pad)
    ("medium", "clean"): (2.0, 0.75, 1.0, 1.0),
    ("medium", "blur"): (1.0, 2.0, 0.75, 0.75),
    ("medium", "noise"): (1.0, 2.0, 0.5, 0.75),
    ("large", "clean"): (2.0, 2.0, 1.0, 1.0),
    ("large", "blur"): (5.0, 2.0, 0.75, 0.75),
    ("large", "noise"): (2.0, 5.0, 2.0, 2.0),
    ("small", "clean"): (1.0, 0.75, 1.0, 2.0),
    ("small", "blur"): (1.0, 0.75, 1.0, 1.0),
    ("small", "noise"): (5.0, 2.0, 0.1, 0.1),
}

_PRESET_OPTIM = {
    "medium": ("adaptive", 1e-4, 0.5, 12),
    "large": ("adaptive", 1e-4, 0.5, 12),
    "small": ("sgd", 1e-1, 0.1, 15),
}


def default_weights(preset_name, degradation="clean", alpha=0.2):
    l1, l2, la, lp = _PRESET_WEIGHTS[(preset_name, degradation)]
    return L.LossWeights(
        alpha=alpha, lambda1=l1, lambda2=l2, lambda_auth=la, lambda_pad=lp
    )


def default_optimizer(preset_name):
    return _PRESET_OPTIM[preset_name]


# ---------------------------------------------------------------------------
# batch streams


def class_balanced_batches(x, y, batch_size, samples_per_class, rng):
    """One epoch of P-classes-x-S-samples batches for triplet mining.

    Classes are permuted and chunked into groups of P = batch_size / S;
    each class contributes S images drawn without replacement. Classes left
    over after chunking sit out the epoch (they rotate back in later).
    """
    s = samples_per_class
    p = batch_size // s
    classes = np.unique(y)
    if len(classes) < 2:
        raise TrainError("need at least 2 classes for triplet batches")
    if len(classes) < p:
        p = len(classes)
    order = rng.permutation(classes)
    by_class = {c: np.flatnonzero(y == c) for c in classes}
    batches = []
    for start in range(0, len(order) - p + 1, p):
        chosen = order[start : start + p]
        idx = []
        for c in chosen:
            pool = by_class[c]
            if len(pool) >= s:
                take = rng.choice(len(pool), size=s, replace=False)
            else:
                take = rng.choice(len(pool), size=s, replace=True)
            idx.extend(pool[take])
        idx = np.array(idx)
        batches.append((x[idx], y[idx]))
    return batches


def shuffled_batches(x, y, batch_size, rng):
    """Plain shuffled minibatches (PAD stream); drops the ragged tail."""
    order = rng.permutation(len(x))
    batches = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start : start + batch_size]
        batches.append((x[idx], y[idx]))
    if not batches:
        batches.append((x[order], y[order]))
    return batches


def _check_ea_data(x, y):
    if len(np.unique(y)) < 2:
        raise TrainError("EA data needs at least 2 identity classes")


def _check_pad_data(x, y):
    if len(np.unique(y)) < 2:
        raise TrainError("PAD data needs both live and spoof samples")


# ---------------------------------------------------------------------------
# single-task loops


def _ea_step(model, batch_x, batch_y, alpha):
    feats = model.forward_features(batch_x)
    triplets = L.mine_triplets(feats, batch_y)
    return L.triplet_loss(feats, triplets, alpha)


def train_ea_only(cfg, ea_data, stream="ea-batches", init_label="init"):
    """Triplet-only training; this model is also the distillation teacher."""
    x, y = ea_data
    _check_ea_data(x, y)
    model = EmbeddingModel.build(
        preset(cfg.preset, feature_dim=cfg.feature_dim),
        derive_seed(cfg.seed, init_label),
    )
    rng = derive_rng(cfg.seed, stream)
    log = TrainLog()
    it = 0
    for epoch in range(cfg.epochs):
        lr = lr_decay(cfg.lr, epoch, cfg.gamma, cfg.decay_after)
        for bx, by in class_balanced_batches(
            x, y, cfg.batch_size, cfg.samples_per_class, rng
        ):
            loss = _ea_step(model, bx, by, cfg.weights.alpha)
            loss.backward()
            ensure_grads(model.params)
            optimizer_step(model.params, lr, cfg.optimizer)
            log.append(epoch, it, "EA", loss.item(), loss.item(), 0.0, lr)
            it += 1
    return model, log


def train_pad_only(cfg, pad_data, stream="pad-batches", init_label="init"):
    """Spoof cross-entropy only."""
    x, y = pad_data
    _check_pad_data(x, y)
    model = EmbeddingModel.build(
        preset(cfg.preset, feature_dim=cfg.feature_dim),
        derive_seed(cfg.seed, init_label),
    )
    rng = derive_rng(cfg.seed, stream)
    log = TrainLog()
    it = 0
    for epoch in range(cfg.epochs):
        lr = lr_decay(cfg.lr, epoch, cfg.gamma, cfg.decay_after)
        for bx, by in shuffled_batches(x, y, cfg.batch_size, rng):
            _, logits = model.forward_all(bx)
            loss = L.pad_loss(logits, by)
            loss.backward()
            ensure_grads(model.params)
            optimizer_step(model.params, lr, cfg.optimizer)
            log.append(epoch, it, "PAD", loss.item(), loss.item(), 0.0, lr)
            it += 1
    return model, log


# ---------------------------------------------------------------------------
# alternating loops


def _alternating_epoch(cfg, epoch, it, x_ea, y_ea, x_pad, y_pad, rng_ea, rng_pad,
                       ea_loss_fn, pad_loss_fn, model, log):
    """One epoch of strict EA/PAD alternation, cycling the shorter stream."""
    lr = lr_decay(cfg.lr, epoch, cfg.gamma, cfg.decay_after)
    ea_batches = class_balanced_batches(
        x_ea, y_ea, cfg.batch_size, cfg.samples_per_class, rng_ea
    )
    pad_batches = shuffled_batches(x_pad, y_pad, cfg.batch_size, rng_pad)
    n = max(len(ea_batches), len(pad_batches))
    for j in range(n):
        bx, by = ea_batches[j % len(ea_batches)]
        loss, parts = ea_loss_fn(bx, by)
        loss.backward()
        ensure_grads(model.params)
        optimizer_step(model.params, lr, cfg.optimizer)
        log.append(epoch, it, "EA", loss.item(), parts["task"], parts["dis"], lr)
        it += 1
        bx, by = pad_batches[j % len(pad_batches)]
        loss, parts = pad_loss_fn(bx, by)
        loss.backward()
        ensure_grads(model.params)
        optimizer_step(model.params, lr, cfg.optimizer)
        log.append(epoch, it, "PAD", loss.item(), parts["task"], parts["dis"], lr)
        it += 1
    return it


def train_mtl(cfg, ea_data, pad_data):
    """Alternating triplet / cross-entropy updates of one shared model."""
    x_ea, y_ea = ea_data
    x_pad, y_pad = pad_data
    _check_ea_data(x_ea, y_ea)
    _check_pad_data(x_pad, y_pad)
    model = EmbeddingModel.build(
        preset(cfg.preset, feature_dim=cfg.feature_dim), derive_seed(cfg.seed, "init")
    )
    rng_ea = derive_rng(cfg.seed, "ea-batches")
    rng_pad = derive_rng(cfg.seed, "pad-batches")
    log = TrainLog()

    def ea_fn(bx, by):
        loss = _ea_step(model, bx, by, cfg.weights.alpha)
        return loss, {"task": loss.item(), "dis": 0.0}

    def pad_fn(bx, by):
        _, logits = model.forward_all(bx)
        loss = L.pad_loss(logits, by)
        return loss, {"task": loss.item(), "dis": 0.0}

    it = 0
    for epoch in range(cfg.epochs):
        it = _alternating_epoch(cfg, epoch, it, x_ea, y_ea, x_pad, y_pad,
                                rng_ea, rng_pad, ea_fn, pad_fn, model, log)
    return model, log


def train_eyepad(cfg, ea_data, pad_data, teacher=None):
    """Step 1 trains the EA teacher; Step 2 trains its clone for PAD while
    distilling the teacher's features on every PAD batch.

    A pre-trained (trainable or frozen) teacher may be supplied to skip
    Step 1. Returns (frozen teacher, student, student TrainLog).
    """
    x_pad, y_pad = pad_data
    _check_pad_data(x_pad, y_pad)
    if teacher is None:
        teacher, _ = train_ea_only(cfg, ea_data)
    if not teacher.frozen:
        teacher.freeze()
    student = clone_init(teacher)
    rng = derive_rng(cfg.seed, "pad-batches")
    log = TrainLog()
    it = 0
    for epoch in range(cfg.epochs):
        lr = lr_decay(cfg.lr, epoch, cfg.gamma, cfg.decay_after)
        for bx, by in shuffled_batches(x_pad, y_pad, cfg.batch_size, rng):
            loss, parts = L.eyepad_multi(bx, by, student, teacher, cfg.weights)
            loss.backward()
            ensure_grads(student.params)
            optimizer_step(student.params, lr, cfg.optimizer)
            log.append(epoch, it, "PAD", loss.item(), parts["task"], parts["dis"], lr)
            it += 1
    return teacher, student, log


def train_eyepadpp(cfg, ea_data, pad_data, pretrained=None):
    """Step 3: alternate EA/PAD training of a clone of the Step-2 student,
    distilling that student's features on every batch.

    pretrained may carry (teacher, student) from train_eyepad; otherwise
    Steps 1-2 run here. The returned TrainLog covers the alternating phase.
    """
    x_ea, y_ea = ea_data
    x_pad, y_pad = pad_data
    _check_ea_data(x_ea, y_ea)
    _check_pad_data(x_pad, y_pad)
    if pretrained is None:
        _, student, _ = train_eyepad(cfg, ea_data, pad_data)
    else:
        _, student = pretrained
    if not student.frozen:
        student.freeze()
    model = clone_init(student)
    rng_ea = derive_rng(cfg.seed, "ea-batches")
    rng_pad = derive_rng(cfg.seed, "pad-batches")
    log = TrainLog()

    def ea_fn(bx, by):
        return L.eyepadpp_id(bx, by, model, student, cfg.weights)

    def pad_fn(bx, by):
        return L.eyepadpp_pad(bx, by, model, student, cfg.weights)

    it = 0
    for epoch in range(cfg.epochs):
        it = _alternating_epoch(cfg, epoch, it, x_ea, y_ea, x_pad, y_pad,
                                rng_ea, rng_pad, ea_fn, pad_fn, model, log)
    return model, log


def train_mtmt(cfg, ea_data, pad_data):
    """Single-task teachers first, then an MTL student distilling from both.

    Teachers use the same schedule as the student (the baseline spells out
    none of its own); their init/batch streams are distinct so the student
    never aliases a teacher. Returns (student, student TrainLog).
    """
    x_ea, y_ea = ea_data
    x_pad, y_pad = pad_data
    _check_ea_data(x_ea, y_ea)
    _check_pad_data(x_pad, y_pad)
    m_auth, _ = train_ea_only(
        cfg, ea_data, init_label="mtmt-auth-init"
    )
    m_auth.freeze()
    m_pad, _ = train_pad_only(
        cfg, pad_data, init_label="mtmt-pad-init"
    )
    m_pad.freeze()
    model = EmbeddingModel.build(
        preset(cfg.preset, feature_dim=cfg.feature_dim), derive_seed(cfg.seed, "init")
    )
    rng_ea = derive_rng(cfg.seed, "ea-batches")
    rng_pad = derive_rng(cfg.seed, "pad-batches")
    log = TrainLog()

    def ea_fn(bx, by):
        return L.mtmt_id(bx, by, model, m_auth, m_pad, cfg.weights)

    def pad_fn(bx, by):
        return L.mtmt_pad(bx, by, model, m_auth, m_pad, cfg.weights)

    it = 0
    for epoch in range(cfg.epochs):
        it = _alternating_epoch(cfg, epoch, it, x_ea, y_ea, x_pad, y_pad,
                                rng_ea, rng_pad, ea_fn, pad_fn, model, log)
    return model, log


def run_strategy(cfg, bundle):
    """Train the configured strategy on a bundle; returns the model that the
    protocols evaluate plus its TrainLog."""
    ea = bundle.ea_train_arrays()
    pad = bundle.pad_arrays("pad_train")
    if cfg.strategy == "ea_only":
        return train_ea_only(cfg, ea)
    if cfg.strategy == "pad_only":
        return train_pad_only(cfg, pad)
    if cfg.strategy == "mtl":
        return train_mtl(cfg, ea, pad)
    if cfg.strategy == "mtmt":
        return train_mtmt(cfg, ea, pad)
    if cfg.strategy == "eyepad":
        _, student, log = train_eyepad(cfg, ea, pad)
        return student, log
    if cfg.strategy == "eyepadpp":
        return train_eyepadpp(cfg, ea, pad)
    raise TrainError(f"unknown strategy '{cfg.strategy}'")
