import numpy as np
import pytest

import oracles
from eyepad.autodiff import Tensor, logistic
from eyepad.protocols import (
    MetricsReport,
    ProtocolError,
    apcer_bpcer_hter,
    compute_ofrr,
    evaluate_model,
    eye_to_eye_eval,
    pad_scores,
    repeat_and_average,
    roc_and_tar,
    roc_from_scores,
    sar_threshold,
    tdr_at_fdr,
    user_to_user,
)


class StubModel:
    """Looks up features / pad logits by the code stored in patch[0, 0]."""

    def __init__(self, features, logits, scale=1.0):
        self.features = {k: np.asarray(v, dtype=np.float64) for k, v in features.items()}
        self.logits = dict(logits)
        self.scale = scale

    def _codes(self, batch):
        batch = np.asarray(batch)
        return [int(round(p.flat[0] * 100)) for p in batch]

    def forward_features(self, batch):
        rows = [self.scale * self.features[c] for c in self._codes(batch)]
        return Tensor(np.stack(rows))

    def forward_pad_logit(self, batch):
        z = np.array([self.logits[c] for c in self._codes(batch)])
        return Tensor(z), logistic(z)


def patch(code, size=4):
    p = np.full((size, size), code / 100.0)
    return p


def unit(deg, dim=4, axes=(0, 1)):
    v = np.zeros(dim)
    rad = np.deg2rad(deg)
    v[axes[0]] = np.cos(rad)
    v[axes[1]] = np.sin(rad)
    return v


SQ3 = np.sqrt(3.0) / 2.0
SQ2 = np.sqrt(2.0) / 2.0


def five_user_fixture():
    """Protocol 1 + 2 fixture with hand-computed similarities.

    All left features live on axes (0,1), right on (2,3); every pair
    similarity is 0.5*(cos(dL) + cos(dR)) of the angle differences below.
    """
    q_l_angles = {0: 0, 1: 90, 2: 180, 3: 270, 4: 45}
    g_l_angles = {0: 0, 1: 90, 2: 210, 3: 330, 4: 135}
    q_r_angles = {0: 0, 1: 90, 2: 180, 3: 270, 4: 45}
    g_r_angles = {0: 0, 1: 90, 2: 210, 3: 270, 4: 135}
    features = {}
    logits = {}
    query = {}
    gallery = {}
    for u in range(5):
        codes = dict(ql=10 + u, qr=20 + u, gl=30 + u, gr=40 + u)
        features[codes["ql"]] = unit(q_l_angles[u], axes=(0, 1))
        features[codes["gl"]] = unit(g_l_angles[u], axes=(0, 1))
        features[codes["qr"]] = unit(q_r_angles[u], axes=(2, 3))
        features[codes["gr"]] = unit(g_r_angles[u], axes=(2, 3))
        # user 2's stored left eye trips PAD: logistic(ln 9) = 0.9
        logits[codes["ql"]] = np.log(9.0) if u == 2 else np.log(1.0 / 9.0)
        logits[codes["qr"]] = np.log(1.0 / 9.0)
        logits[codes["gl"]] = logits[codes["gr"]] = 0.0
        query[(u, "L")] = np.stack([patch(codes["ql"])])
        query[(u, "R")] = np.stack([patch(codes["qr"])])
        gallery[(u, "L")] = np.stack([patch(codes["gl"])])
        gallery[(u, "R")] = np.stack([patch(codes["gr"])])
    model = StubModel(features, logits)
    # hand-computed via the angle differences
    expected_genuine = {0: 1.0, 1: 1.0, 2: SQ3, 3: 0.5 * (0.5 + 1.0), 4: 0.0}
    expected_impostor = {
        (0, 1): 0.0, (0, 2): -SQ3, (0, 3): 0.5 * (SQ3 + 0.0), (0, 4): -SQ2,
        (1, 0): 0.0, (1, 2): -0.5, (1, 3): 0.5 * (-0.5 - 1.0), (1, 4): SQ2,
        (2, 0): -1.0, (2, 1): 0.0, (2, 3): 0.5 * (-SQ3 + 0.0), (2, 4): SQ2,
        (3, 0): 0.0, (3, 1): -1.0, (3, 2): 0.5, (3, 4): -SQ2,
        (4, 0): SQ2, (4, 1): SQ2, (4, 2): 0.5 * (np.cos(np.deg2rad(165)) * 2) / 2,
        (4, 3): 0.5 * (np.cos(np.deg2rad(75)) + np.cos(np.deg2rad(225))),
    }
    expected_impostor[(4, 2)] = np.cos(np.deg2rad(165))
    return model, query, gallery, expected_genuine, expected_impostor


class TestUserToUser:
    def test_identical_feature_model_gives_all_ones(self):
        features = {c: np.array([1.0, 2.0, 3.0, 4.0]) for c in range(10, 50)}
        logits = {c: 0.0 for c in range(10, 50)}
        model = StubModel(features, logits)
        query = {(u, s): np.stack([patch(10 + u)]) for u in range(3) for s in ("L", "R")}
        gallery = {(u, s): np.stack([patch(20 + u)]) for u in range(3) for s in ("L", "R")}
        res = user_to_user(model, query, gallery, 1, np.random.default_rng(0))
        for pair, s in res.similarity.items():
            assert s == pytest.approx(1.0, abs=1e-9)

    def test_k_copies_equal_k1(self):
        features = {c: np.array([float(c), 1.0, 0.0, 0.0]) for c in range(10, 60)}
        logits = {c: 0.0 for c in range(10, 60)}
        model = StubModel(features, logits)
        query = {(u, s): np.stack([patch(10 + u)]) for u in range(2) for s in ("L", "R")}
        gallery = {
            (u, s): np.stack([patch(30 + u), patch(30 + u)])
            for u in range(2)
            for s in ("L", "R")
        }
        r1 = user_to_user(model, query, gallery, 1, np.random.default_rng(3))
        r2 = user_to_user(model, query, gallery, 2, np.random.default_rng(4))
        for pair in r1.similarity:
            assert r1.similarity[pair] == pytest.approx(r2.similarity[pair], abs=1e-12)

    def test_insufficient_gallery_rejected(self):
        features = {c: np.ones(4) for c in range(10, 60)}
        model = StubModel(features, {c: 0.0 for c in range(10, 60)})
        query = {(u, s): np.stack([patch(10 + u)]) for u in range(2) for s in ("L", "R")}
        gallery = {(u, s): np.stack([patch(30 + u)]) for u in range(2) for s in ("L", "R")}
        with pytest.raises(ProtocolError):
            user_to_user(model, query, gallery, 5, np.random.default_rng(0))

    def test_five_user_hand_worked_similarities(self):
        model, query, gallery, expected_genuine, expected_impostor = five_user_fixture()
        res = user_to_user(model, query, gallery, 1, np.random.default_rng(0))
        for u, val in expected_genuine.items():
            assert res.similarity[(u, u)] == pytest.approx(val, abs=1e-9)
        for pair, val in expected_impostor.items():
            assert res.similarity[pair] == pytest.approx(val, abs=1e-9), pair
        # FAR=1e-3 admits no impostor: threshold is the smallest score above
        # the largest impostor (sqrt(2)/2), which is user 3's genuine 0.75
        assert res.t_auth == pytest.approx(0.75, abs=1e-9)
        assert res.tar_at_far[1e-3] == pytest.approx(0.8)

    def test_scale_invariance_of_chain(self):
        model, query, gallery, _, _ = five_user_fixture()
        scaled = StubModel(model.features, model.logits, scale=7.3)
        a = user_to_user(model, query, gallery, 1, np.random.default_rng(5))
        b = user_to_user(scaled, query, gallery, 1, np.random.default_rng(5))
        for pair in a.similarity:
            assert a.similarity[pair] == pytest.approx(b.similarity[pair], abs=1e-9)
        assert a.t_auth == pytest.approx(b.t_auth, abs=1e-9)


class TestRoc:
    def test_perfect_separation(self):
        roc, tars, thr = roc_and_tar(
            np.array([0.9, 0.8, 0.7, 0.1, 0.0]),
            np.array([True, True, True, False, False]),
        )
        assert all(v == 1.0 for v in tars.values())

    def test_single_pair_example(self):
        roc, tars, thr = roc_and_tar(
            np.array([0.9, 0.1]), np.array([True, False])
        )
        assert tars[1e-3] == 1.0
        assert thr[1e-3] == pytest.approx(0.9)

    def test_endpoints_and_monotonicity(self):
        rng = np.random.default_rng(0)
        roc = roc_from_scores(rng.normal(size=50), rng.normal(size=60))
        assert roc.tar[0] == 1.0 and roc.far[0] == 1.0
        assert roc.tar[-1] == 0.0 and roc.far[-1] == 0.0
        assert np.all(np.diff(roc.tar) <= 0)
        assert np.all(np.diff(roc.far) <= 0)

    def test_tar_monotone_in_far_target(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            g = rng.normal(0.5, 1, size=rng.integers(5, 200))
            i = rng.normal(-0.5, 1, size=rng.integers(5, 200))
            roc = roc_from_scores(g, i)
            t4, _ = roc.tar_at_far(1e-4)
            t3, _ = roc.tar_at_far(1e-3)
            t2, _ = roc.tar_at_far(1e-2)
            assert t4 <= t3 <= t2

    def test_matches_brute_force_sweep(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            g, i = oracles.random_score_set(rng, max_n=500)
            roc = roc_from_scores(g, i)
            for target in (1e-4, 1e-3, 1e-2, 0.1):
                tar, thr = roc.tar_at_far(target)
                otar, othr = oracles.sweep_tar_at_far(g, i, target)
                assert tar == pytest.approx(otar, abs=1e-12)
                assert thr == pytest.approx(othr, abs=1e-12) or (
                    np.isinf(thr) and np.isinf(othr)
                )

    def test_empty_class_rejected(self):
        with pytest.raises(ProtocolError):
            roc_from_scores([], [0.1])


class TestEer:
    def test_identical_per_user_features_eer_zero(self):
        feats = {10: np.array([1.0, 0, 0, 0]), 11: np.array([1.0, 0, 0, 0]),
                 20: np.array([0, 1.0, 0, 0]), 21: np.array([0, 1.0, 0, 0])}
        model = StubModel(feats, {c: 0.0 for c in feats})
        images = np.stack([patch(10), patch(11), patch(20), patch(21)])
        tar, eer = eye_to_eye_eval(model, images, np.array([0, 0, 1, 1]))
        assert eer == 0.0 and tar == 1.0

    def test_single_user_rejected(self):
        feats = {10: np.ones(4), 11: np.ones(4)}
        model = StubModel(feats, {c: 0.0 for c in feats})
        with pytest.raises(ProtocolError):
            eye_to_eye_eval(model, np.stack([patch(10), patch(11)]), np.array([0, 0]))

    def test_matches_brute_force_sweep(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            g, i = oracles.random_score_set(rng, max_n=300)
            roc = roc_from_scores(g, i)
            assert roc.eer() == pytest.approx(oracles.sweep_eer(g, i), abs=1e-12)


class TestPadMetrics:
    def test_tdr_separable(self):
        scores = np.array([0.9, 0.8, 0.1, 0.2])
        labels = np.array([1, 1, 0, 0])
        assert tdr_at_fdr(scores, labels) == 1.0

    def test_tdr_all_equal_scores(self):
        scores = np.full(10, 0.5)
        labels = np.array([1, 1, 1, 1, 1, 0, 0, 0, 0, 0])
        assert tdr_at_fdr(scores, labels) == 0.0

    def test_tdr_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            n = int(rng.integers(20, 500))
            scores = rng.random(n)
            labels = rng.integers(0, 2, size=n)
            while len(np.unique(labels)) < 2:
                labels = rng.integers(0, 2, size=n)
            got = tdr_at_fdr(scores, labels)
            assert got == pytest.approx(
                oracles.sweep_tdr_at_fdr(scores, labels, 0.002), abs=1e-12
            )

    def test_apcer_bpcer_hter_clean_split(self):
        scores = np.array([0.9, 0.9, 0.1, 0.1])
        labels = np.array([1, 1, 0, 0])
        assert apcer_bpcer_hter(scores, labels) == (0.0, 0.0, 0.0)

    def test_apcer_bpcer_hter_flipped_model(self):
        scores = np.array([0.1, 0.1, 0.9, 0.9])
        labels = np.array([1, 1, 0, 0])
        assert apcer_bpcer_hter(scores, labels) == (1.0, 1.0, 1.0)

    def test_apcer_bpcer_hand_count(self):
        # spoof: 0.3, 0.5, 0.8, 0.9 -> 0.3 and 0.5 accepted (<= 0.5): APCER = 2/4
        # live: 0.2, 0.4, 0.6, 0.7, 0.45, 0.55 -> 0.6, 0.7, 0.55 flagged: BPCER = 3/6
        scores = np.array([0.3, 0.5, 0.8, 0.9, 0.2, 0.4, 0.6, 0.7, 0.45, 0.55])
        labels = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
        apcer, bpcer, hter = apcer_bpcer_hter(scores, labels)
        assert apcer == pytest.approx(0.5)
        assert bpcer == pytest.approx(0.5)
        assert hter == pytest.approx(0.5)
        a2, b2, h2 = oracles.hand_apcer_bpcer(scores, labels)
        assert (apcer, bpcer, hter) == (a2, b2, h2)


class TestSarThreshold:
    def test_hundred_distinct_scores(self):
        scores = np.arange(1.0, 101.0) / 100.0
        t = sar_threshold(scores)
        assert t == pytest.approx(0.05)  # the 5th value of 1..100 scaled
        assert np.mean(scores <= t) <= 0.05

    def test_all_equal(self):
        scores = np.full(30, 0.7)
        assert sar_threshold(scores) == 0.7

    def test_matches_selection_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            scores = rng.random(int(rng.integers(20, 400)))
            assert sar_threshold(scores) == pytest.approx(
                oracles.selection_sar_threshold(scores), abs=0.0
            )

    def test_too_few_spoofs_rejected(self):
        with pytest.raises(ProtocolError):
            sar_threshold(np.arange(10.0))


class TestOfrr:
    def test_nothing_rejected_with_loose_thresholds(self):
        model, query, gallery, _, _ = five_user_fixture()
        res = user_to_user(model, query, gallery, 1, np.random.default_rng(0))
        ofrr, xs, xa = compute_ofrr(model, res, t_auth=-1.0, t_pad=np.inf)
        assert (ofrr, xs, xa) == (0.0, 0, 0)

    def test_direct_formula(self):
        # |Q|=150 with 3 spoof + 6 auth rejections gives 0.06
        assert (3 + 6) / 150 == pytest.approx(0.06)

    def test_five_user_hand_worked_ofrr(self):
        model, query, gallery, _, _ = five_user_fixture()
        res = user_to_user(model, query, gallery, 1, np.random.default_rng(0))
        # t_pad = 0.8: only user 2's left eye (prob 0.9) exceeds it;
        # user 4 survives PAD but s(4,4)=0 < t_auth=0.75; user 3 sits exactly
        # at the threshold and is accepted (reject only when strictly below)
        ofrr, xs, xa = compute_ofrr(model, res, t_auth=res.t_auth, t_pad=0.8)
        assert xs == 1
        assert xa == 1
        assert ofrr == pytest.approx(0.4)

    def test_decomposition_invariants(self):
        model, query, gallery, _, _ = five_user_fixture()
        res = user_to_user(model, query, gallery, 1, np.random.default_rng(0))
        rng = np.random.default_rng(6)
        for _ in range(25):
            t_auth = rng.uniform(-1.2, 1.2)
            t_pad = rng.uniform(0.0, 1.0)
            ofrr, xs, xa = compute_ofrr(model, res, t_auth, t_pad)
            assert 0.0 <= ofrr <= 1.0
            assert xs + xa <= 5
            assert ofrr == pytest.approx((xs + xa) / 5.0)

    def test_missing_similarity_entry_rejected(self):
        model, query, gallery, _, _ = five_user_fixture()
        res = user_to_user(model, query, gallery, 1, np.random.default_rng(0))
        del res.similarity[(3, 3)]
        with pytest.raises(ProtocolError):
            compute_ofrr(model, res, 0.5, 0.5)


class TestRepeatAndAverage:
    def test_single_image_users_identical_across_runs(self):
        model, query, gallery, _, _ = five_user_fixture()

        def one_run(rng):
            res = user_to_user(model, query, gallery, 1, rng)
            return {"t_auth": res.t_auth, "tar": res.tar_at_far[1e-2]}

        means, per_run = repeat_and_average(one_run, 4, master_seed=9)
        assert len(set(per_run["t_auth"])) == 1
        assert means["t_auth"] == per_run["t_auth"][0]

    def test_runs_one_mean_equals_single(self):
        calls = []

        def one_run(rng):
            calls.append(1)
            return {"x": 0.25}

        means, per_run = repeat_and_average(one_run, 1, master_seed=0)
        assert means == {"x": 0.25} and len(calls) == 1

    def test_master_seed_reproducible(self):
        outs = []

        def one_run(rng):
            return {"x": float(rng.random())}

        for _ in range(2):
            means, _ = repeat_and_average(one_run, 5, master_seed=42)
            outs.append(means["x"])
        assert outs[0] == outs[1]


class TestEvaluateModel:
    def test_full_report_on_trained_model(self, tiny_bundle):
        from eyepad.trainers import TrainConfig, train_pad_only

        cfg = TrainConfig(strategy="pad_only", epochs=3, lr=1e-3, seed=1,
                          batch_size=16, samples_per_class=4, preset="small")
        model, _ = train_pad_only(cfg, tiny_bundle.pad_arrays("pad_train"))
        rep = evaluate_model(model, tiny_bundle, k_values=(1, 2), runs=2,
                             master_seed=3)
        d = rep.to_dict()
        assert set(d["k_results"]) == {"1", "2"}
        assert d["pad"]["hter"] == pytest.approx(
            (d["pad"]["apcer"] + d["pad"]["bpcer"]) / 2.0
        )
        for k in (1, 2):
            kr = rep.k_results[k]
            assert 0.0 <= kr.ofrr <= 1.0
            assert len(kr.per_run["ofrr"]) == 2

    def test_report_deterministic(self, tiny_bundle):
        import json

        from eyepad.trainers import TrainConfig, train_pad_only

        cfg = TrainConfig(strategy="pad_only", epochs=2, lr=1e-3, seed=2,
                          batch_size=16, samples_per_class=4, preset="small")
        model, _ = train_pad_only(cfg, tiny_bundle.pad_arrays("pad_train"))
        a = evaluate_model(model, tiny_bundle, k_values=(1,), runs=2, master_seed=5)
        b = evaluate_model(model, tiny_bundle, k_values=(1,), runs=2, master_seed=5)
        assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(
            b.to_dict(), sort_keys=True
        )
