"""Losses: hard-mined triplet, feature-level cosine distillation, spoof
cross-entropy, and the combined objectives of the distillation strategies.

Mining is index selection on feature values (not differentiated); every
loss itself is built from autodiff ops so gradients flow to the student.
The combined losses check that their teachers are frozen before running.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._kernels import pairwise_sqdist
from .autodiff import Tensor


class MiningError(Exception):
    pass


class TeacherNotFrozenError(Exception):
    def __init__(self, role):
        self.role = role
        super().__init__(f"teacher model '{role}' must be frozen")


@dataclass
class TripletIndices:
    """Per-anchor (anchor, hardest positive, hardest negative) batch indices."""

    anchor: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return len(self.anchor)

    def as_tuples(self):
        return list(zip(self.anchor.tolist(), self.pos.tolist(), self.neg.tolist()))


@dataclass
class LossWeights:
    """Margin and distillation weights of the combined losses."""

    alpha: float = 0.2
    lambda1: float = 2.0
    lambda2: float = 0.75
    lambda_auth: float = 1.0
    lambda_pad: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        for name in ("lambda1", "lambda2", "lambda_auth", "lambda_pad"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


def mine_triplets(features, labels):
    """Hardest positive and hardest negative per anchor.

    Every batch element whose class has another member becomes an anchor:
    pos maximizes the squared distance among same-class rows, neg minimizes
    it among other-class rows; ties break to the lowest index. Raises when
    no element is minable (all classes singletons) or only one class is
    present.
    """
    values = features.values if isinstance(features, Tensor) else np.asarray(features)
    labels = np.asarray(labels)
    n = values.shape[0]
    if labels.shape[0] != n:
        raise MiningError(f"{n} feature rows but {labels.shape[0]} labels")
    if len(np.unique(labels)) < 2:
        raise MiningError("batch contains a single class; no negatives exist")
    dists = pairwise_sqdist(
        np.ascontiguousarray(values), np.ascontiguousarray(values)
    )
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_ok = same & ~eye
    anchors = np.flatnonzero(pos_ok.any(axis=1))
    if anchors.size == 0:
        raise MiningError("every class in the batch has a single sample")
    pos_d = np.where(pos_ok, dists, -np.inf)
    neg_d = np.where(~same, dists, np.inf)
    # argmax/argmin return the first (lowest-index) extremum on ties
    pos = np.argmax(pos_d[anchors], axis=1)
    neg = np.argmin(neg_d[anchors], axis=1)
    return TripletIndices(anchor=anchors, pos=pos, neg=neg)


def triplet_loss(features, triplets, alpha):
    """Mean hinge of (d(a,pos) - d(a,neg) + alpha) over mined triplets."""
    fa = ad.gather_rows(features, triplets.anchor)
    fp = ad.gather_rows(features, triplets.pos)
    fn = ad.gather_rows(features, triplets.neg)
    pre = ad.sqdist(fp, fa) - ad.sqdist(fn, fa) + float(alpha)
    return ad.mean(ad.hinge(pre))


def distill_loss(f_s, f_t, eps=1e-12):
    """Mean cosine distance between matching feature rows, in [0, 2].

    eps is added to each norm so zero-norm features stay finite; the value
    is invariant under positive scaling of either argument.
    """
    num = ad.dot(f_s, f_t)
    denom = ad.mul(ad.l2norm(f_s) + eps, ad.l2norm(f_t) + eps)
    cos = ad.div(num, denom)
    return ad.mean(1.0 - cos)


def pad_loss(logits, labels):
    """Mean binary cross-entropy of logistic(logit) against {live=0, spoof=1}.

    Uses the log-sum-exp identity BCE = softplus(z) - z*y, stable at any
    logit magnitude.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.values.shape:
        raise ad.ShapeError("pad_loss", logits.values.shape, y.shape)
    return ad.mean(ad.softplus(logits) - ad.mul(logits, ad.constant(y)))


def _require_frozen(model, role):
    if not model.frozen:
        raise TeacherNotFrozenError(role)


def eyepad_multi(pad_batch, pad_labels, student, teacher, weights):
    """Spoof cross-entropy plus weighted distillation toward the teacher.

    The student's PAD logit and features come from one trunk pass over the
    PAD batch; the frozen teacher supplies the distillation target.
    """
    _require_frozen(teacher, "ea_teacher")
    f_s, logits = student.forward_all(pad_batch)
    with ad.no_grad():
        f_t = teacher.forward_features(pad_batch)
    task = pad_loss(logits, pad_labels)
    dis = distill_loss(f_s, f_t)
    total = task + weights.lambda1 * dis
    return total, {"task": task.item(), "dis": dis.item()}


def eyepadpp_id(ea_batch, ea_labels, student, teacher_s, weights):
    """Triplet loss on an EA batch plus distillation toward the first student."""
    _require_frozen(teacher_s, "eyepad_student")
    f = student.forward_features(ea_batch)
    with ad.no_grad():
        f_t = teacher_s.forward_features(ea_batch)
    triplets = mine_triplets(f, ea_labels)
    task = triplet_loss(f, triplets, weights.alpha)
    dis = distill_loss(f, f_t)
    total = task + weights.lambda2 * dis
    return total, {"task": task.item(), "dis": dis.item()}


def eyepadpp_pad(pad_batch, pad_labels, student, teacher_s, weights):
    """Spoof cross-entropy on a PAD batch plus the same distillation term."""
    _require_frozen(teacher_s, "eyepad_student")
    f, logits = student.forward_all(pad_batch)
    with ad.no_grad():
        f_t = teacher_s.forward_features(pad_batch)
    task = pad_loss(logits, pad_labels)
    dis = distill_loss(f, f_t)
    total = task + weights.lambda2 * dis
    return total, {"task": task.item(), "dis": dis.item()}


def _mtmt_terms(batch, model, m_auth, m_pad, weights):
    _require_frozen(m_auth, "auth_teacher")
    _require_frozen(m_pad, "pad_teacher")
    f, logits = model.forward_all(batch)
    with ad.no_grad():
        f_auth = m_auth.forward_features(batch)
        f_pad = m_pad.forward_features(batch)
    dis_auth = distill_loss(f_auth, f)
    dis_pad = distill_loss(f_pad, f)
    dis = weights.lambda_auth * dis_auth + weights.lambda_pad * dis_pad
    return f, logits, dis, dis_auth.item() + dis_pad.item()


def mtmt_id(ea_batch, ea_labels, model, m_auth, m_pad, weights):
    """Triplet loss plus distillation from both single-task teachers."""
    f, _, dis, dis_val = _mtmt_terms(ea_batch, model, m_auth, m_pad, weights)
    triplets = mine_triplets(f, ea_labels)
    task = triplet_loss(f, triplets, weights.alpha)
    total = task + dis
    return total, {"task": task.item(), "dis": dis_val}


def mtmt_pad(pad_batch, pad_labels, model, m_auth, m_pad, weights):
    """Spoof cross-entropy plus distillation from both single-task teachers."""
    _, logits, dis, dis_val = _mtmt_terms(pad_batch, model, m_auth, m_pad, weights)
    task = pad_loss(logits, pad_labels)
    total = task + dis
    return total, {"task": task.item(), "dis": dis_val}
