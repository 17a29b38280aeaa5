import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from elk.geometry import LatticeLayer
from elk.precision import layer_precision
from elk.sparse_la import (
    NotPositiveDefiniteError,
    analyze,
    cholesky,
    cholesky_values,
    dense_cholesky,
    dense_logdet,
    jittered_dense_cholesky,
    sample_gmrf,
    solve,
)
from elk.special import matern1_corr


def random_spd(rng, n=8):
    M = rng.standard_normal((n, n))
    return M.T @ M + np.eye(n)


spd_seeds = st.integers(0, 2**32 - 1)


class TestCholesky:
    def test_identity(self):
        f = cholesky(sp.identity(5, format="csc"))
        assert f.logdet == 0.0
        np.testing.assert_allclose(f.L.toarray(), np.eye(5))

    def test_two_by_two(self):
        f = cholesky(sp.csc_matrix([[10.0, -6.0], [-6.0, 10.0]]))
        assert f.logdet == pytest.approx(np.log(64.0), abs=1e-14)

    @given(spd_seeds)
    def test_reconstruction(self, seed):
        Q = random_spd(np.random.default_rng(seed))
        f = cholesky(sp.csc_matrix(Q))
        L = f.L.toarray()
        p = f.permutation
        assert np.all(np.diag(L) > 0)
        err = np.linalg.norm(L @ L.T - Q[np.ix_(p, p)]) / np.linalg.norm(Q)
        assert err < 1e-12

    @given(st.integers(2, 50), spd_seeds)
    def test_logdet_vs_eigenvalues(self, n, seed):
        Q = random_spd(np.random.default_rng(seed), n)
        assert cholesky(sp.csc_matrix(Q)).logdet == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(Q))), rel=1e-10, abs=1e-8)

    def test_not_positive_definite(self):
        with pytest.raises(NotPositiveDefiniteError):
            cholesky(sp.csc_matrix([[1.0, 2.0], [2.0, 1.0]]))

    def test_values_path_and_reuse(self, rng):
        layer = LatticeLayer(1, 1.0, 0, 5, 6, (0, 0))
        Q1 = layer_precision(layer, 0.7, 1, 1, 1)
        sym = analyze(Q1)
        for kappa in (0.7, 1.9, 0.3):
            Q = layer_precision(layer, kappa, 1, 1, 1)
            data = sp.tril(Q, format="csc")
            data.sort_indices()
            ref = cholesky(Q).logdet
            assert cholesky_values(sym, data.data).logdet == pytest.approx(ref, rel=1e-13)
            assert cholesky_values(sym, data.data, reuse=True).logdet == pytest.approx(ref, rel=1e-13)

    def test_reuse_survives_failure(self):
        Q = sp.csc_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
        sym = analyze(Q)
        with pytest.raises(NotPositiveDefiniteError):
            cholesky_values(sym, [1.0, 3.0, 1.0], reuse=True)
        assert cholesky_values(sym, [2.0, 1.0, 2.0], reuse=True).logdet == pytest.approx(np.log(3.0))


class TestSolve:
    def test_identity(self, rng):
        b = rng.standard_normal(6)
        np.testing.assert_array_equal(solve(cholesky(sp.identity(6, format="csc")), b), b)

    @given(spd_seeds)
    def test_dense_oracle(self, seed):
        r = np.random.default_rng(seed)
        Q = random_spd(r)
        f = cholesky(sp.csc_matrix(Q))
        B = r.standard_normal((8, 3))
        X = solve(f, B)
        np.testing.assert_allclose(Q @ X, B, atol=1e-10)
        np.testing.assert_allclose(X, np.linalg.inv(Q) @ B, atol=1e-10)

    @given(spd_seeds, st.floats(-10, 10))
    def test_linear(self, seed, a):
        r = np.random.default_rng(seed)
        f = cholesky(sp.csc_matrix(random_spd(r)))
        b1, b2 = r.standard_normal(8), r.standard_normal(8)
        np.testing.assert_allclose(solve(f, a * b1 + b2), a * solve(f, b1) + solve(f, b2), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            solve(cholesky(sp.identity(3, format="csc")), np.ones(4))


class TestSampling:
    Q = layer_precision(LatticeLayer(1, 1.0, 0, 3, 3, (0, 0)), 1.0, 1, 1, 1).toarray()

    def test_zero_noise_returns_mean(self):
        f = cholesky(sp.csc_matrix(self.Q))
        mu = np.arange(9.0)
        np.testing.assert_array_equal(sample_gmrf(f, mu, None, z=np.zeros(9)), mu)

    def test_moments(self):
        f = cholesky(sp.csc_matrix(self.Q))
        n = 20000
        mu = np.linspace(-1, 1, 9)
        X = sample_gmrf(f, mu, np.random.default_rng(7), size=n)
        S = np.linalg.inv(self.Q)
        sd = np.sqrt(np.diag(S))
        assert np.all(np.abs(X.mean(axis=1) - mu) < 4 * sd / np.sqrt(n))
        C = np.cov(X)
        se = np.sqrt((S**2 + np.outer(np.diag(S), np.diag(S))) / n)
        assert np.all(np.abs(C - S) < 4 * se)

    def test_deterministic(self):
        f = cholesky(sp.csc_matrix(self.Q))
        a = sample_gmrf(f, np.zeros(9), np.random.default_rng(3), size=4)
        b = sample_gmrf(f, np.zeros(9), np.random.default_rng(3), size=4)
        np.testing.assert_array_equal(a, b)


class TestDense:
    def test_scalar(self):
        np.testing.assert_array_equal(dense_cholesky([[4.0]]), [[2.0]])

    def test_matern_with_jitter(self, rng):
        pts = rng.uniform(0, 1, (50, 2))
        d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
        C = matern1_corr(d, 0.5)
        L = jittered_dense_cholesky(C, 1e-8)
        np.testing.assert_allclose(L @ L.T, C + 1e-8 * np.eye(50), atol=1e-12)

    @given(spd_seeds)
    def test_matches_sparse(self, seed):
        Q = random_spd(np.random.default_rng(seed))
        assert dense_logdet(dense_cholesky(Q)) == pytest.approx(cholesky(sp.csc_matrix(Q)).logdet, rel=1e-12)

    def test_indefinite(self):
        with pytest.raises(NotPositiveDefiniteError):
            dense_cholesky([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NotPositiveDefiniteError):
            jittered_dense_cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
