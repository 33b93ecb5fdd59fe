import numpy as np
import pytest

from uttenc.dataio import BadMagicError, BadVersionError, TruncatedPayloadError
from uttenc.gmm import (DiagonalGmm, KmeansCodebook, default_std_floor,
                        gmm_fit_em, kmeans_fit, posteriors, read_gmm, write_gmm)
from uttenc.rng import Rng


class TestDiagonalGmm:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            DiagonalGmm(weights=[0.6, 0.6], means=np.zeros((2, 1)),
                        stds=np.ones((2, 1)))

    def test_stds_must_be_positive(self):
        with pytest.raises(ValueError):
            DiagonalGmm(weights=[1.0], means=np.zeros((1, 2)),
                        stds=np.array([[1.0, 0.0]]))


class TestKmeansFit:
    def test_k1_is_mean(self):
        rng = Rng(0)
        x = rng.normal((50, 3))
        cb = kmeans_fit(x, 1, Rng(1))
        np.testing.assert_allclose(cb.centroids[0], x.mean(axis=0), atol=1e-12)
        assert cb.counts.sum() == 50

    def test_k_equals_l(self):
        x = np.array([[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]])
        cb = kmeans_fit(x, 3, Rng(2))
        got = {tuple(c) for c in cb.centroids}
        want = {tuple(row) for row in x}
        assert got == want
        assert sorted(cb.counts) == [1, 1, 1]

    def test_two_blobs(self):
        rng = Rng(3)
        a = rng.normal((100, 2), std=0.1) + np.array([5.0, 0.0])
        b = rng.normal((100, 2), std=0.1) + np.array([-5.0, 0.0])
        cb = kmeans_fit(np.vstack([a, b]), 2, Rng(4))
        centers = sorted(cb.centroids.tolist())
        assert np.linalg.norm(np.array(centers[0]) - [-5.0, 0.0]) < 0.1
        assert np.linalg.norm(np.array(centers[1]) - [5.0, 0.0]) < 0.1

    def test_insufficient_data(self):
        with pytest.raises(ValueError, match="insufficient data"):
            kmeans_fit(np.zeros((2, 2)), 3, Rng(0))

    def test_counts_sum_to_frames(self):
        x = Rng(5).normal((37, 4))
        cb = kmeans_fit(x, 5, Rng(6))
        assert cb.counts.sum() == 37


class TestGmmFitEm:
    def test_k1_closed_form(self):
        x = Rng(7).normal((500, 2), mean=1.0, std=2.0)
        cb = kmeans_fit(x, 1, Rng(8))
        fit = gmm_fit_em(x, 1, cb, max_iters=50)
        np.testing.assert_allclose(fit.gmm.weights, [1.0])
        np.testing.assert_allclose(fit.gmm.means[0], x.mean(axis=0), atol=1e-8)
        np.testing.assert_allclose(fit.gmm.stds[0], x.std(axis=0), atol=1e-6)

    def test_two_component_recovery(self):
        rng = Rng(9)
        half = 5000
        x = np.vstack([rng.normal((half, 1), mean=-2.0, std=0.5),
                       rng.normal((half, 1), mean=2.0, std=0.5)])
        fit = gmm_fit_em(x, 2, kmeans_fit(x, 2, Rng(10)), max_iters=100)
        order = np.argsort(fit.gmm.means[:, 0])
        np.testing.assert_allclose(fit.gmm.means[order, 0], [-2.0, 2.0], atol=0.1)
        np.testing.assert_allclose(fit.gmm.stds[order, 0], [0.5, 0.5], atol=0.1)
        np.testing.assert_allclose(fit.gmm.weights[order], [0.5, 0.5], atol=0.1)

    def test_loglik_nondecreasing(self):
        x = Rng(11).normal((300, 3))
        fit = gmm_fit_em(x, 4, kmeans_fit(x, 4, Rng(12)), max_iters=40)
        ll = np.array(fit.log_likelihood)
        assert np.all(np.diff(ll) >= -1e-8)

    def test_degenerate_input(self):
        x = np.tile([1.0, 2.0], (30, 1))
        with pytest.warns(RuntimeWarning):
            fit = gmm_fit_em(x, 2, kmeans_fit(x, 2, Rng(13)),
                             var_floor=0.01, max_iters=10)
        assert fit.degenerate
        np.testing.assert_allclose(fit.gmm.stds, 0.01)

    def test_respects_var_floor(self):
        x = Rng(14).normal((200, 2), std=0.001)
        with pytest.warns(RuntimeWarning):
            fit = gmm_fit_em(x, 2, kmeans_fit(x, 2, Rng(15)), var_floor=0.05)
        assert fit.gmm.stds.min() >= 0.05

    def test_default_floor_positive(self):
        x = Rng(16).normal((100, 4))
        assert np.all(default_std_floor(x) > 0)


class TestPosteriors:
    def test_k1_all_ones(self):
        gmm = DiagonalGmm(weights=[1.0], means=np.zeros((1, 2)),
                          stds=np.ones((1, 2)))
        g = posteriors(gmm, Rng(17).normal((10, 2)))
        np.testing.assert_allclose(g, 1.0)

    def test_identical_components(self):
        gmm = DiagonalGmm(weights=[0.5, 0.5], means=np.zeros((2, 3)),
                          stds=np.ones((2, 3)))
        g = posteriors(gmm, Rng(18).normal((10, 3)))
        np.testing.assert_allclose(g, 0.5, atol=1e-12)

    def test_one_dim_analytic(self):
        # 1-D, mu = {-1, +1}, sigma = 1, alpha = 1/2: at x = 1 the second
        # component's posterior is e^2 / (1 + e^2)
        gmm = DiagonalGmm(weights=[0.5, 0.5], means=[[-1.0], [1.0]],
                          stds=np.ones((2, 1)))
        g = posteriors(gmm, [[1.0]])
        assert g[0, 1] == pytest.approx(np.exp(2.0) / (1.0 + np.exp(2.0)),
                                        abs=1e-5)
        assert g[0, 1] == pytest.approx(0.88080, abs=1e-5)

    def test_rows_sum_to_one(self):
        rng = Rng(19)
        gmm = DiagonalGmm(weights=[0.2, 0.3, 0.5], means=rng.normal((3, 4)),
                          stds=0.5 + rng.uniform(size=(3, 4)))
        g = posteriors(gmm, rng.normal((25, 4), std=3.0))
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(g >= 0) and np.all(g <= 1)

    def test_component_permutation_equivariance(self):
        rng = Rng(20)
        means = rng.normal((3, 2))
        stds = 0.5 + rng.uniform(size=(3, 2))
        w = np.array([0.2, 0.3, 0.5])
        x = rng.normal((8, 2))
        perm = [2, 0, 1]
        g = posteriors(DiagonalGmm(weights=w, means=means, stds=stds), x)
        gp = posteriors(DiagonalGmm(weights=w[perm], means=means[perm],
                                    stds=stds[perm]), x)
        np.testing.assert_allclose(gp, g[:, perm], atol=1e-12)

    def test_dim_mismatch(self):
        gmm = DiagonalGmm(weights=[1.0], means=np.zeros((1, 2)),
                          stds=np.ones((1, 2)))
        with pytest.raises(ValueError):
            posteriors(gmm, np.zeros((3, 5)))


class TestDgmmFormat:
    def test_round_trip(self, tmp_path):
        rng = Rng(21)
        gmm = DiagonalGmm(weights=[0.25, 0.75], means=rng.normal((2, 3)),
                          stds=0.5 + rng.uniform(size=(2, 3)))
        path = tmp_path / "model.dgmm"
        write_gmm(path, gmm)
        back = read_gmm(path)
        np.testing.assert_array_equal(back.weights, gmm.weights)
        np.testing.assert_array_equal(back.means, gmm.means)
        np.testing.assert_array_equal(back.stds, gmm.stds)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dgmm"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(BadMagicError, match="bad magic"):
            read_gmm(path)

    def test_bad_version(self, tmp_path):
        import struct
        path = tmp_path / "bad.dgmm"
        path.write_bytes(b"DGMM" + struct.pack("<III", 9, 1, 1) + b"\x00" * 24)
        with pytest.raises(BadVersionError):
            read_gmm(path)

    def test_truncated(self, tmp_path):
        import struct
        path = tmp_path / "bad.dgmm"
        path.write_bytes(b"DGMM" + struct.pack("<III", 1, 2, 3) + b"\x00" * 8)
        with pytest.raises(TruncatedPayloadError):
            read_gmm(path)
