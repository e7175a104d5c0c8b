"""Verification protocols and metrics: user-to-user similarity, ROC/TAR,
PAD rates, threshold selection, OFRR, and eye-to-eye verification.

Scores are similarities (higher = more genuine) for verification and spoof
probabilities (higher = more spoof) for PAD. A sample is accepted at
threshold t when its score is >= t; thresholds reported for a target rate
are the smallest candidate threshold whose false rate does not exceed the
target, so the stated rate is never exceeded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad


class ProtocolError(Exception):
    pass


@dataclass
class RocCurve:
    """Operating points swept over ascending thresholds.

    thresholds[0] = -inf (accept everything: TAR=FAR=1) and
    thresholds[-1] = +inf (reject everything: TAR=FAR=0); in between, one
    point per distinct observed score. TAR and FAR are non-increasing.
    """

    thresholds: np.ndarray
    tar: np.ndarray
    far: np.ndarray
    n_genuine: int
    n_impostor: int

    def tar_at_far(self, target):
        """Best TAR subject to FAR <= target, with its threshold."""
        idx = int(np.argmax(self.far <= target))
        return float(self.tar[idx]), float(self.thresholds[idx])

    def eer(self):
        """Operating point where FAR equals FRR, linearly interpolated."""
        frr = 1.0 - self.tar
        d = self.far - frr
        idx = int(np.argmax(d <= 0.0))
        if d[idx] == 0.0:
            return float(self.far[idx])
        lo, hi = idx - 1, idx
        theta = d[lo] / (d[lo] - d[hi])
        return float(self.far[lo] + theta * (self.far[hi] - self.far[lo]))


def roc_from_scores(genuine, impostor):
    """Build a RocCurve from raw similarity scores of both classes."""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ProtocolError("need at least one genuine and one impostor score")
    cand = np.unique(np.concatenate([genuine, impostor]))
    thresholds = np.concatenate([[-np.inf], cand, [np.inf]])
    # counts of scores >= t via descending sort + searchsorted
    gs = np.sort(genuine)
    is_ = np.sort(impostor)
    tar = (genuine.size - np.searchsorted(gs, thresholds, side="left")) / genuine.size
    far = (impostor.size - np.searchsorted(is_, thresholds, side="left")) / impostor.size
    return RocCurve(thresholds, tar, far, genuine.size, impostor.size)


def roc_and_tar(similarities, match_labels, far_targets=(1e-4, 1e-3, 1e-2)):
    """ROC plus TAR and threshold at each FAR target.

    similarities: mapping (query, gallery) -> score, or a score array.
    match_labels: same-structure truth; truthy = genuine pair.
    """
    if isinstance(similarities, dict):
        keys = sorted(similarities)
        scores = np.array([similarities[k] for k in keys], dtype=np.float64)
        truth = np.array([bool(match_labels[k]) for k in keys])
    else:
        scores = np.asarray(similarities, dtype=np.float64)
        truth = np.asarray(match_labels, dtype=bool)
    roc = roc_from_scores(scores[truth], scores[~truth])
    tars = {}
    thresholds = {}
    for target in far_targets:
        tars[target], thresholds[target] = roc.tar_at_far(target)
    return roc, tars, thresholds


@dataclass
class U2UResult:
    """Output of one user-to-user verification run."""

    similarity: dict            # (query_user, gallery_user) -> score
    q_left: dict                # query_user -> sampled left patch
    q_right: dict               # query_user -> sampled right patch
    t_auth: float
    roc: RocCurve
    tar_at_far: dict


def _batched_features(model, patches):
    with no_grad():
        return model.forward_features(patches).values


def user_to_user(model, query, gallery, k, rng, far_targets=(1e-4, 1e-3, 1e-2)):
    """Protocol 1: match 1 query pair against K gallery pairs per user.

    query/gallery: {(user_id, side): stacked patches}. Per user, one left
    and one right query image are sampled; per gallery user, K images per
    side are sampled and their features averaged before the cosine. The
    pair similarity is the mean of the left and right cosines. t_auth is
    the threshold at FAR=1e-3.
    """
    q_users = sorted({u for u, _ in query})
    g_users = sorted({u for u, _ in gallery})
    q_sel = {}
    g_sel = {}
    for u in q_users:
        for side in ("L", "R"):
            imgs = query[(u, side)]
            q_sel[(u, side)] = imgs[rng.integers(len(imgs))]
    for u in g_users:
        for side in ("L", "R"):
            imgs = gallery[(u, side)]
            if len(imgs) < k:
                raise ProtocolError(
                    f"gallery user {u} side {side} has {len(imgs)} images, need {k}"
                )
            idx = rng.choice(len(imgs), size=k, replace=False)
            g_sel[(u, side)] = imgs[idx]

    feats_q = {}
    feats_g = {}
    for side in ("L", "R"):
        fq = _batched_features(model, np.stack([q_sel[(u, side)] for u in q_users]))
        for i, u in enumerate(q_users):
            feats_q[(u, side)] = fq[i]
        stacked = np.concatenate([g_sel[(u, side)] for u in g_users])
        fg = _batched_features(model, stacked)
        for i, u in enumerate(g_users):
            feats_g[(u, side)] = fg[i * k : (i + 1) * k].mean(axis=0)

    def cosine(a, b):
        na = np.linalg.norm(a) + 1e-12
        nb = np.linalg.norm(b) + 1e-12
        return float(np.dot(a, b) / (na * nb))

    similarity = {}
    for qa in q_users:
        for gb in g_users:
            s = 0.5 * (
                cosine(feats_q[(qa, "L")], feats_g[(gb, "L")])
                + cosine(feats_q[(qa, "R")], feats_g[(gb, "R")])
            )
            similarity[(qa, gb)] = s
    truth = {(qa, gb): qa == gb for qa in q_users for gb in g_users}
    roc, tars, thresholds = roc_and_tar(similarity, truth, far_targets)
    return U2UResult(
        similarity=similarity,
        q_left={u: q_sel[(u, "L")] for u in q_users},
        q_right={u: q_sel[(u, "R")] for u in q_users},
        t_auth=thresholds[1e-3],
        roc=roc,
        tar_at_far=tars,
    )


def pad_scores(model, patches):
    """Spoof probabilities for a stack of patches."""
    if len(patches) == 0:
        raise ProtocolError("empty PAD batch")
    with no_grad():
        _, probs = model.forward_pad_logit(np.asarray(patches))
    return probs


def tdr_at_fdr(scores, labels, fdr=0.002):
    """Spoof detection rate at the strictest threshold keeping FDR <= target.

    scores are spoof probabilities; labels 1 = spoof (the detection
    target), 0 = live. FDR is the fraction of live samples flagged.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    spoof = scores[labels == 1]
    live = scores[labels == 0]
    if live.size == 0:
        raise ProtocolError("no live samples")
    if spoof.size == 0:
        raise ProtocolError("no spoof samples")
    roc = roc_from_scores(spoof, live)  # TAR=TDR, FAR=FDR
    tdr, _ = roc.tar_at_far(fdr)
    return tdr


def apcer_bpcer_hter(scores, labels, threshold=0.5):
    """Fixed-threshold PAD error rates.

    APCER: spoof accepted as live (score <= threshold); BPCER: live flagged
    as spoof (score > threshold); HTER: their mean.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    spoof = scores[labels == 1]
    live = scores[labels == 0]
    if spoof.size == 0 or live.size == 0:
        raise ProtocolError("need both live and spoof samples")
    apcer = float(np.mean(spoof <= threshold))
    bpcer = float(np.mean(live > threshold))
    return apcer, bpcer, (apcer + bpcer) / 2.0


def sar_threshold(spoof_scores, sar=0.05):
    """PAD operating threshold at the target spoof acceptance rate.

    Returns the lower-interpolation quantile of the spoof scores (the order
    statistic at floor(sar * (n - 1))); spoofs scoring <= the threshold are
    the ones accepted as live.
    """
    scores = np.asarray(spoof_scores, dtype=np.float64)
    if scores.size < 20:
        raise ProtocolError(
            f"need >= 20 spoof samples for the {sar:.0%} quantile, got {scores.size}"
        )
    return float(np.quantile(scores, sar, method="lower"))


def compute_ofrr(model, u2u, t_auth, t_pad):
    """Protocol 2: fraction of genuine query users falsely rejected.

    A query user is rejected as spoof when either stored eye's spoof
    probability exceeds t_pad; otherwise rejected as non-match when the
    similarity against their own gallery user falls below t_auth.
    """
    users = sorted(u2u.q_left)
    for u in users:
        if (u, u) not in u2u.similarity:
            raise ProtocolError(f"similarity entry missing for user {u}")
    left = pad_scores(model, np.stack([u2u.q_left[u] for u in users]))
    right = pad_scores(model, np.stack([u2u.q_right[u] for u in users]))
    x_spoof = 0
    x_auth = 0
    for i, u in enumerate(users):
        if left[i] > t_pad or right[i] > t_pad:
            x_spoof += 1
        elif u2u.similarity[(u, u)] < t_auth:
            x_auth += 1
    ofrr = (x_spoof + x_auth) / len(users)
    return ofrr, x_spoof, x_auth


def eye_to_eye_eval(model, images, user_ids, far_target=1e-3):
    """All-pairs right-eye verification: TAR at the FAR target plus EER."""
    images = np.asarray(images)
    user_ids = np.asarray(user_ids)
    if len(np.unique(user_ids)) < 2:
        raise ProtocolError("need images from at least 2 users")
    counts = np.bincount(np.unique(user_ids, return_inverse=True)[1])
    if np.min(counts) < 2:
        raise ProtocolError("every user needs at least 2 images")
    feats = _batched_features(model, images)
    norms = np.linalg.norm(feats, axis=1) + 1e-12
    unit = feats / norms[:, None]
    sims = unit @ unit.T
    iu, ju = np.triu_indices(len(images), k=1)
    same = user_ids[iu] == user_ids[ju]
    roc = roc_from_scores(sims[iu, ju][same], sims[iu, ju][~same])
    tar, _ = roc.tar_at_far(far_target)
    return tar, roc.eer()


@dataclass
class KResult:
    """Averaged Protocol 1 + Protocol 2 metrics for one gallery size K."""

    k: int
    ofrr: float
    x_spoof: float
    x_auth: float
    tar_at_far: dict
    t_auth: float
    per_run: dict = field(default_factory=dict)


@dataclass
class MetricsReport:
    """Everything the evaluation emits for a model on a bundle."""

    runs: int
    k_results: dict              # k -> KResult
    tdr_at_fdr_002: float
    apcer: float
    bpcer: float
    hter: float
    t_pad: float
    eer: float
    eye_to_eye_tar: float

    def to_dict(self):
        return {
            "runs": self.runs,
            "k_results": {
                str(k): {
                    "k": r.k,
                    "ofrr": r.ofrr,
                    "x_spoof": r.x_spoof,
                    "x_auth": r.x_auth,
                    "tar_at_far": {f"{t:.0e}": v for t, v in r.tar_at_far.items()},
                    "t_auth": r.t_auth,
                    "per_run": r.per_run,
                }
                for k, r in self.k_results.items()
            },
            "pad": {
                "tdr_at_fdr_002": self.tdr_at_fdr_002,
                "apcer": self.apcer,
                "bpcer": self.bpcer,
                "hter": self.hter,
                "t_pad": self.t_pad,
            },
            "eye_to_eye": {"tar_at_far_1e-03": self.eye_to_eye_tar, "eer": self.eer},
        }


def repeat_and_average(run_fn, runs, master_seed):
    """Run a seeded protocol several times and average every metric.

    run_fn(rng) must return a flat dict of scalars; the result carries the
    per-run values plus their means.
    """
    if runs < 1:
        raise ProtocolError("runs must be >= 1")
    per_run = {}
    for i in range(runs):
        rng = np.random.default_rng(
            np.random.SeedSequence([int(master_seed), 0x0F, i])
        )
        out = run_fn(rng)
        for key, val in out.items():
            per_run.setdefault(key, []).append(float(val))
    means = {key: float(np.mean(vals)) for key, vals in per_run.items()}
    return means, per_run


def evaluate_model(
    model,
    bundle,
    k_values=(1, 2, 5),
    runs=10,
    far_targets=(1e-4, 1e-3, 1e-2),
    master_seed=0,
):
    """Full evaluation: Protocols 1+2 averaged over runs, PAD metrics, EER."""
    query = bundle.eye_images("ea_query")
    gallery = bundle.eye_images("ea_gallery")
    pad_x, pad_y = bundle.pad_arrays("pad_test")
    probs = pad_scores(model, pad_x)
    t_pad = sar_threshold(probs[pad_y == 1])
    tdr = tdr_at_fdr(probs, pad_y)
    apcer, bpcer, hter = apcer_bpcer_hter(probs, pad_y)

    k_results = {}
    for k in k_values:
        def one_run(rng, k=k):
            u2u = user_to_user(model, query, gallery, k, rng, far_targets)
            ofrr, x_spoof, x_auth = compute_ofrr(model, u2u, u2u.t_auth, t_pad)
            out = {"ofrr": ofrr, "x_spoof": x_spoof, "x_auth": x_auth,
                   "t_auth": u2u.t_auth}
            for t in far_targets:
                out[f"tar_at_far_{t:.0e}"] = u2u.tar_at_far[t]
            return out

        means, per_run = repeat_and_average(one_run, runs, master_seed + k)
        k_results[k] = KResult(
            k=k,
            ofrr=means["ofrr"],
            x_spoof=means["x_spoof"],
            x_auth=means["x_auth"],
            tar_at_far={t: means[f"tar_at_far_{t:.0e}"] for t in far_targets},
            t_auth=means["t_auth"],
            per_run=per_run,
        )

    right = bundle.eye_images("ea_query")
    r_imgs = []
    r_ids = []
    for (uid, side), imgs in sorted(right.items()):
        if side == "R":
            r_imgs.append(imgs)
            r_ids.extend([uid] * len(imgs))
    e2e_tar, eer = eye_to_eye_eval(model, np.concatenate(r_imgs), np.array(r_ids))

    return MetricsReport(
        runs=runs,
        k_results=k_results,
        tdr_at_fdr_002=tdr,
        apcer=apcer,
        bpcer=bpcer,
        hter=hter,
        t_pad=t_pad,
        eer=eer,
        eye_to_eye_tar=e2e_tar,
    )
