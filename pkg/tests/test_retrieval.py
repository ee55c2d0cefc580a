import numpy as np
import pytest

from pmsfm import retrieval as rt
from pmsfm.errors import DimensionMismatch, InsufficientSamples


def feature_map(rng, h=4, w=4, d=8):
    return rt.FeatureMap(rng.normal(size=(h, w, d)))


class TestWhitening:
    def test_identity_covariance_gives_identity(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(20000, 4))
        X -= X.mean(axis=0)
        wh = rt.fit_whitening(X)
        assert np.allclose(wh.mean, 0.0, atol=1e-6)
        W = wh.apply(X)
        assert np.allclose(np.cov(W, rowvar=False), np.eye(4), atol=2e-2)

    def test_diag_covariance_whitened_to_identity(self):
        # derived oracle: recompute the covariance after the transform
        rng = np.random.default_rng(1)
        X = rng.normal(size=(5000, 2)) * np.array([2.0, 1.0])
        wh = rt.fit_whitening(X)
        W = wh.apply(X)
        assert np.allclose(np.cov(W, rowvar=False), np.eye(2), atol=1e-6)

    def test_insufficient_samples(self):
        rng = np.random.default_rng(2)
        with pytest.raises(InsufficientSamples):
            rt.fit_whitening(rng.normal(size=(8, 8)))

    def test_condition_number_bounded(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(500, 3))
        X[:, 2] = 0.0  # rank-deficient direction
        wh = rt.fit_whitening(X)
        s = np.linalg.svd(wh.transform, compute_uv=False)
        assert s[0] / s[-1] < 1e8


class TestCodebook:
    def test_k_equals_n_returns_permutation(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(12, 3))
        cb = rt.train_codebook(X, K=12, iters=5, seed=0)
        got = sorted(map(tuple, np.round(cb.centroids, 9)))
        want = sorted(map(tuple, np.round(X, 9)))
        assert got == want

    def test_two_blobs(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(200, 2)) * 0.05 + np.array([5.0, 0.0])
        b = rng.normal(size=(200, 2)) * 0.05 + np.array([-5.0, 0.0])
        X = np.vstack([a, b])
        cb = rt.train_codebook(X, K=2, iters=10, seed=1)
        means = sorted(map(tuple, cb.centroids))
        want = sorted([tuple(b.mean(axis=0)), tuple(a.mean(axis=0))])
        for got_c, want_c in zip(means, want):
            assert np.linalg.norm(np.array(got_c) - np.array(want_c)) < 0.1

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(100, 4))
        c1 = rt.train_codebook(X, K=7, iters=8, seed=42)
        c2 = rt.train_codebook(X, K=7, iters=8, seed=42)
        assert np.array_equal(c1.centroids, c2.centroids)

    def test_insufficient(self):
        with pytest.raises(InsufficientSamples):
            rt.train_codebook(np.zeros((3, 2)), K=4)


class TestEncode:
    def test_tokens_on_centroid_give_all_plus_one(self):
        d = 6
        cb = rt.Codebook(np.vstack([np.zeros(d), np.ones(d) * 10]))
        wh = rt.Whitening(np.zeros(d), np.eye(d))
        fm = rt.FeatureMap(np.zeros((2, 2, d)))
        desc = rt.asmk_encode(fm, wh, cb)
        assert list(desc.cells) == [0]
        assert np.all(desc.bits == 1)

    def test_binarization_equals_offset_signs(self):
        # hand-computed residuals: one token per centroid with a known offset
        d = 4
        cents = np.array([[0.0, 0, 0, 0], [10.0, 10, 10, 10]])
        off0 = np.array([0.5, -0.5, 0.25, -0.25])
        off1 = np.array([-1.0, 2.0, -3.0, 4.0])
        fm = rt.FeatureMap(np.stack([cents[0] + off0, cents[1] + off1])[None])
        wh = rt.Whitening(np.zeros(d), np.eye(d))
        desc = rt.asmk_encode(fm, wh, rt.Codebook(cents))
        assert list(desc.cells) == [0, 1]
        assert np.array_equal(desc.bits[0], np.sign(off0).astype(np.int8))
        assert np.array_equal(desc.bits[1], np.sign(off1).astype(np.int8))

    def test_empty_map_rejected(self):
        with pytest.raises(ValueError):
            rt.FeatureMap(np.zeros((0, 4, 8)))

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(7)
        fm = feature_map(rng, d=8)
        cb = rt.Codebook(rng.normal(size=(4, 6)))
        wh = rt.Whitening(np.zeros(6), np.eye(6))
        with pytest.raises(DimensionMismatch):
            rt.asmk_encode(fm, wh, cb)


def _desc(cells, bits):
    return rt.AsmkDescriptor(cells=np.asarray(cells, np.int32),
                             bits=np.asarray(bits, np.int8))


class TestSimilarity:
    def test_identical_is_one(self):
        d = _desc([0, 3], [[1, -1, 1, -1, 1, 1, -1, -1], [1] * 8])
        assert rt.asmk_similarity(d, d) == 1.0

    def test_disjoint_cells_zero(self):
        a = _desc([0], [[1] * 8])
        b = _desc([1], [[1] * 8])
        assert rt.asmk_similarity(a, b) == 0.0

    def test_hand_computed_case(self):
        # shared cell with u = 4/8 = 0.5 -> sigma(0.5) = 0.125;
        # each descriptor has two cells -> self-scores 2 and 2
        shared_a = [1, 1, 1, 1, 1, 1, 1, 1]
        shared_b = [1, 1, 1, 1, 1, 1, -1, -1]  # dot = 4, u = 0.5... needs dot=4
        # dot(shared_a, shared_b) = 6 - 2 = 4 -> u = 0.5
        a = _desc([0, 1], [shared_a, [1] * 8])
        b = _desc([0, 2], [shared_b, [1] * 8])
        got = rt.asmk_similarity(a, b)
        assert np.isclose(got, 0.125 / np.sqrt(2 * 2))

    def test_symmetry_exact(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            cells_a = np.sort(rng.choice(10, size=4, replace=False))
            cells_b = np.sort(rng.choice(10, size=5, replace=False))
            a = _desc(cells_a, rng.choice([-1, 1], size=(4, 8)))
            b = _desc(cells_b, rng.choice([-1, 1], size=(5, 8)))
            assert rt.asmk_similarity(a, b) == rt.asmk_similarity(b, a)


def _pipeline(rng, n_images=6, h=6, w=6, d=8, K=16):
    maps = [feature_map(rng, h, w, d) for _ in range(n_images)]
    tokens = np.vstack([m.tokens() for m in maps])
    wh = rt.fit_whitening(tokens)
    cb = rt.train_codebook(wh.apply(tokens), K=K, iters=5, seed=0)
    descs = [rt.asmk_encode(m, wh, cb) for m in maps]
    return maps, wh, cb, descs


class TestSimilarityMatrix:
    def test_single_image(self):
        rng = np.random.default_rng(9)
        _, _, _, descs = _pipeline(rng, n_images=1)
        S = rt.similarity_matrix(descs[:1])
        assert S.values.shape == (1, 1) and S.values[0, 0] == 1.0

    def test_copies_give_all_ones(self):
        rng = np.random.default_rng(10)
        _, _, _, descs = _pipeline(rng, n_images=1)
        S = rt.similarity_matrix([descs[0]] * 4)
        assert np.allclose(S.values, 1.0)

    def test_matches_pairwise_loop(self):
        rng = np.random.default_rng(11)
        _, _, _, descs = _pipeline(rng, n_images=4)
        S = rt.similarity_matrix(descs)
        for i in range(4):
            for j in range(4):
                want = 1.0 if i == j else rt.asmk_similarity(descs[i], descs[j])
                assert S.values[i, j] == want

    def test_self_similarity_one(self):
        rng = np.random.default_rng(12)
        _, _, _, descs = _pipeline(rng, n_images=5)
        for d in descs:
            assert rt.asmk_similarity(d, d) == 1.0


class TestRankingProperties:
    def test_noise_monotonicity_on_average(self):
        rng = np.random.default_rng(13)
        maps, wh, cb, _ = _pipeline(rng, n_images=3)
        base = maps[0]
        scale = np.linalg.norm(base.tokens(), axis=1).mean()
        sims = []
        for eps in (0.01, 0.05, 0.15, 0.4):
            acc = 0.0
            for _ in range(20):
                noisy = rt.FeatureMap(base.features + rng.normal(size=base.features.shape) * eps * scale)
                da = rt.asmk_encode(base, wh, cb)
                db = rt.asmk_encode(noisy, wh, cb)
                acc += rt.asmk_similarity(da, db)
            sims.append(acc / 20)
        assert all(a >= b - 1e-9 for a, b in zip(sims, sims[1:]))

    def test_perturbed_copy_beats_random_images(self):
        rng = np.random.default_rng(14)
        maps, wh, cb, descs = _pipeline(rng, n_images=11)
        base = maps[0]
        scale = np.linalg.norm(base.tokens(), axis=1).mean()
        for trial in range(20):
            noisy = rt.FeatureMap(base.features + rng.normal(size=base.features.shape) * 0.1 * scale)
            dn = rt.asmk_encode(noisy, wh, cb)
            s_self = rt.asmk_similarity(dn, descs[0])
            for other in descs[1:]:
                assert s_self > rt.asmk_similarity(dn, other)


class TestGlobalPool:
    def test_identical_maps_score_one(self):
        rng = np.random.default_rng(15)
        fm = feature_map(rng)
        wh = rt.fit_whitening(rng.normal(size=(100, 8)))
        assert rt.global_pool_similarity(fm, fm, wh) == pytest.approx(1.0)

    def test_range(self):
        rng = np.random.default_rng(16)
        wh = rt.fit_whitening(rng.normal(size=(100, 8)))
        for _ in range(10):
            s = rt.global_pool_similarity(feature_map(rng), feature_map(rng), wh)
            assert 0.0 <= s <= 1.0


class TestDumpFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(17)
        _, _, _, descs = _pipeline(rng, n_images=4)
        path = tmp_path / "descs.bin"
        rt.dump_descriptors(path, descs)
        loaded = rt.load_descriptors(path)
        assert len(loaded) == len(descs)
        for a, b in zip(descs, loaded):
            assert np.array_equal(a.cells, b.cells)
            assert np.array_equal(a.bits, b.bits)

    def test_dump_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(18)
        _, _, _, descs = _pipeline(rng, n_images=2)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        rt.dump_descriptors(p1, descs)
        rt.dump_descriptors(p2, descs)
        assert p1.read_bytes() == p2.read_bytes()
