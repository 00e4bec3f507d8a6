import itertools
import json
import math

import numpy as np
import pytest

from mvdis.evaluate import (MetricsRecord, StratificationError, append_jsonl, ari, contingency,
                            hungarian_acc, kmeans, linear_probe, nmi, pca_project, probe_split,
                            r2_score, read_jsonl, summarize, write_projection_csv, write_summary_csv)


# brute-force oracles, written independently of the vectorised code

def acc_oracle(pred, true):
    ps, ts = sorted(set(pred)), sorted(set(true))
    k = max(len(ps), len(ts))
    best = 0
    for perm in itertools.permutations(range(k)):
        mapping = {p: perm[i] for i, p in enumerate(ps)}
        tidx = {t: i for i, t in enumerate(ts)}
        hits = sum(1 for p, t in zip(pred, true) if mapping[p] == tidx[t])
        best = max(best, hits)
    return best / len(pred)


def nmi_oracle(pred, true):
    n = len(pred)
    def H(lab):
        return -sum(c / n * math.log(c / n) for c in (lab.count(v) for v in set(lab)))
    mi = 0.0
    for a in set(pred):
        for b in set(true):
            nab = sum(1 for p, t in zip(pred, true) if p == a and t == b)
            if nab:
                mi += nab / n * math.log(n * nab / (pred.count(a) * true.count(b)))
    hp, ht = H(pred), H(true)
    if hp == 0 or ht == 0:
        return 1.0 if hp == ht else 0.0
    return mi / math.sqrt(hp * ht)


def ari_oracle(pred, true):
    n = len(pred)
    ss = sd = ds = dd = 0
    for i in range(n):
        for j in range(i + 1, n):
            sp, st = pred[i] == pred[j], true[i] == true[j]
            ss += sp and st
            sd += sp and not st
            ds += st and not sp
            dd += not sp and not st
    pairs = n * (n - 1) / 2
    a, b = ss + sd, ss + ds
    expected = a * b / pairs
    top = 0.5 * (a + b)
    return 1.0 if top == expected else (ss - expected) / (top - expected)


def random_labelings(n_cases=50, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_cases):
        n = int(rng.integers(2, 11))
        kp, kt = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        yield list(rng.integers(0, kp, n)), list(rng.integers(0, kt, n))


class TestHungarian:
    def test_permuted_labels(self):
        true = np.repeat(np.arange(5), 4)
        perm = np.array([3, 0, 4, 1, 2])
        assert hungarian_acc(perm[true], true) == 1.0

    def test_constant_prediction(self):
        true = np.repeat(np.arange(10), 7)
        assert hungarian_acc(np.zeros(70, int), true) == pytest.approx(0.1)

    def test_handcrafted_eight_points(self):
        pred = [0, 0, 1, 1, 1, 2, 2, 0]
        true = [1, 1, 0, 0, 2, 2, 2, 0]
        assert hungarian_acc(pred, true) == acc_oracle(pred, true) == 0.75

    def test_brute_force(self):
        for pred, true in random_labelings():
            assert hungarian_acc(pred, true) == pytest.approx(acc_oracle(pred, true), abs=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            hungarian_acc([], [])


class TestNMI:
    def test_identical(self):
        y = [0, 1, 1, 2, 2, 2]
        assert nmi(y, y) == pytest.approx(1.0)

    def test_constant_prediction(self):
        assert nmi([0] * 6, [0, 1, 2, 0, 1, 2]) == 0.0

    def test_six_points_by_hand(self):
        pred = [0, 0, 0, 1, 1, 1]
        true = [0, 0, 1, 1, 2, 2]
        # H(pred) = ln 2, H(true) = ln 3
        # I = (2/6)ln(2/((1/2)(1/3)·6)) ·2 + (1/6)ln(1/((1/2)(1/3)·6)) ·2 = (2/3)ln 2
        expected = (2 / 3) * math.log(2) / math.sqrt(math.log(2) * math.log(3))
        assert nmi(pred, true) == pytest.approx(expected, abs=1e-12)

    def test_brute_force(self):
        for pred, true in random_labelings(seed=1):
            assert nmi(pred, true) == pytest.approx(nmi_oracle(pred, true), abs=1e-12)


class TestARI:
    def test_identical(self):
        y = [0, 0, 1, 1, 2]
        assert ari(y, y) == pytest.approx(1.0)

    def test_singletons_vs_one_cluster(self):
        assert ari(list(range(8)), [0] * 8) == 0.0

    def test_ten_points_pair_counting(self):
        pred = [0, 0, 1, 1, 2, 2, 2, 0, 1, 2]
        true = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2]
        assert ari(pred, true) == pytest.approx(ari_oracle(pred, true), abs=1e-12)

    def test_brute_force(self):
        for pred, true in random_labelings(seed=2):
            assert ari(pred, true) == pytest.approx(ari_oracle(pred, true), abs=1e-12)


def test_contingency_counts():
    t = contingency([0, 0, 1], [1, 1, 0])
    np.testing.assert_array_equal(t, [[0, 2], [1, 0]])


class TestKMeans:
    def test_two_pairs(self):
        X = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
        res = kmeans(X, 2, seed=0)
        assert res.labels[0] == res.labels[1] != res.labels[2] == res.labels[3]
        # each pair contributes 2·(0.5)²
        assert res.inertia == pytest.approx(1.0)

    def test_k_equals_n(self):
        X = np.random.default_rng(0).normal(size=(7, 3))
        assert kmeans(X, 7, seed=0).inertia == pytest.approx(0.0, abs=1e-12)

    def test_more_restarts_never_worse(self):
        X = np.random.default_rng(3).normal(size=(200, 5))
        for seed in range(5):
            assert kmeans(X, 4, seed, restarts=10).inertia <= kmeans(X, 4, seed, restarts=1).inertia + 1e-9

    def test_inertia_matches_labels(self):
        X = np.random.default_rng(4).normal(size=(60, 2))
        res = kmeans(X, 3, seed=1)
        manual = sum(((X[res.labels == j] - X[res.labels == j].mean(0)) ** 2).sum() for j in range(3))
        assert res.inertia == pytest.approx(manual, rel=1e-9)

    def test_deterministic(self):
        X = np.random.default_rng(5).normal(size=(50, 3))
        np.testing.assert_array_equal(kmeans(X, 3, seed=2).labels, kmeans(X, 3, seed=2).labels)

    def test_bad_k(self):
        X = np.zeros((3, 2))
        with pytest.raises(ValueError):
            kmeans(X, 4)
        with pytest.raises(ValueError):
            kmeans(X, 0)


class TestProbe:
    def test_separable_blobs(self):
        rng = np.random.default_rng(0)
        X = np.concatenate([rng.normal(-3, 0.5, (200, 2)), rng.normal(3, 0.5, (200, 2))])
        y = np.repeat([0, 1], 200)
        assert probe_split(X, y, seed=0).acc_cls >= 0.99

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(4000, 5))
        y = rng.permutation(np.repeat(np.arange(4), 1000))
        acc = probe_split(X, y, seed=1).acc_cls
        assert abs(acc - 0.25) <= 0.05

    def test_single_class_rejected(self):
        X = np.zeros((10, 2))
        with pytest.raises(StratificationError):
            linear_probe(X, np.zeros(10), X, np.zeros(10))

    def test_f_score_perfect(self):
        X = np.array([[0.0], [0.1], [5.0], [5.1]] * 5)
        y = np.array([0, 0, 1, 1] * 5)
        res = linear_probe(X, y, X, y)
        assert res.acc_cls == 1.0 and res.f_score == 1.0


class TestR2:
    def test_exact_linear_map(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(500, 4))
        Y = X @ rng.normal(size=(4, 2)) + 1.0
        assert r2_score(X, Y) > 0.999

    def test_independent_near_zero(self):
        rng = np.random.default_rng(1)
        assert abs(r2_score(rng.normal(size=(2000, 3)), rng.normal(size=(2000, 2)))) < 0.05

    def test_constant_feature_ignored(self):
        rng = np.random.default_rng(2)
        X = np.column_stack([rng.normal(size=300), np.zeros(300)])
        assert r2_score(X, 2 * X[:, :1]) > 0.999


class TestPCA:
    def test_line_in_5d(self):
        rng = np.random.default_rng(0)
        X = np.outer(rng.normal(size=300), rng.normal(size=5))
        assert pca_project(X).explained_ratio[0] >= 0.999

    def test_isotropic(self):
        d = 6
        X = np.random.default_rng(1).normal(size=(20000, d))
        ratios = pca_project(X).explained_ratio
        assert np.all(np.abs(ratios - 1 / d) <= 0.3 / d)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(400, 4)) * np.array([5.0, 3.0, 1.0, 0.5])
        Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        a, b = pca_project(X).coords, pca_project(X @ Q).coords
        for j in range(2):
            sign = np.sign(a[:, j] @ b[:, j])
            np.testing.assert_allclose(a[:, j], sign * b[:, j], atol=1e-9)

    def test_needs_two_columns(self):
        with pytest.raises(ValueError):
            pca_project(np.zeros((5, 1)))

    def test_csv(self, tmp_path):
        p = tmp_path / "proj.csv"
        write_projection_csv(p, pca_project(np.random.default_rng(3).normal(size=(5, 3))), [0, 1, 0, 1, 2])
        lines = p.read_text().splitlines()
        assert lines[0] == "x,y,label" and len(lines) == 6


class TestRecords:
    def test_jsonl_round_trip(self, tmp_path):
        rec = MetricsRecord(0.5, 0.4, 0.3, 0.9, 0.8, seed=3, config_hash="ab", wall_time=1.5, extra={"k": [1, 2]})
        p = tmp_path / "m.jsonl"
        append_jsonl(p, rec)
        append_jsonl(p, rec)
        got = read_jsonl(p)
        assert got == [rec, rec]
        json.loads(p.read_text().splitlines()[0])

    def test_summary_mean_std(self, tmp_path):
        recs = [MetricsRecord(a, a, a, a, a) for a in (0.2, 0.4, 0.6)]
        s = summarize(recs)
        np.testing.assert_allclose(s["acc_clu"], (0.4, np.std([0.2, 0.4, 0.6])))
        write_summary_csv(tmp_path / "s.csv", {"m": recs})
        assert "m" in (tmp_path / "s.csv").read_text()
