import math

import numpy as np
import pytest

from drgp.spectral_kernel import KernelParams, SpectralBasis, feature_map, gram, sm_covariance


def se_params(Q=1, sigma2=1.0, l=1.0):
    return KernelParams(sigma2, np.full(Q, l))


def brute_sm(x, x2, sigma2, l, p):
    out = sigma2
    for a, b, lq, pq in zip(x, x2, l, p):
        tau = a - b
        out *= math.exp(-tau * tau / (2 * lq * lq))
    arg = sum(2 * math.pi * (a - b) / pq for a, b, pq in zip(x, x2, p) if math.isfinite(pq))
    return out * math.cos(arg)


class TestKernelParams:
    def test_infinite_period_is_exact_flag(self):
        p = KernelParams(1.0, [1.0, 2.0], [np.inf, 3.0])
        np.testing.assert_array_equal(p.se_mask, [True, False])
        assert p.frequency_offset[0] == 0.0
        assert p.frequency_offset[1] == pytest.approx(2 * math.pi / 3)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(sigma_power2=0.0, lengthscales=[1.0]),
            dict(sigma_power2=1.0, lengthscales=[-1.0]),
            dict(sigma_power2=1.0, lengthscales=[1.0], sigma_noise2=0.0),
            dict(sigma_power2=1.0, lengthscales=[1.0], periods=[0.0]),
            dict(sigma_power2=1.0, lengthscales=[1.0, 1.0], periods=[1.0]),
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            KernelParams(**kwargs)

    def test_basis_rejects_mismatched_rows(self):
        with pytest.raises(ValueError):
            SpectralBasis(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros(3))

    def test_basis_rejects_phase_out_of_range(self):
        with pytest.raises(ValueError):
            SpectralBasis(np.zeros((1, 1)), np.zeros((1, 1)), [2 * math.pi])


class TestSmCovariance:
    def test_zero_lag_gives_amplitude(self):
        assert sm_covariance([0.3, -1.0], [0.3, -1.0], KernelParams(1.0, [0.5, 2.0])) == 1.0

    def test_unit_lag_se(self):
        # exp(-1/2) from the scalar oracle
        assert sm_covariance([1.0], [0.0], se_params()) == pytest.approx(0.6065306597126334, rel=1e-12)

    def test_matches_brute_force(self, rng):
        for _ in range(10):
            Q = int(rng.integers(1, 4))
            l = rng.uniform(0.3, 2, Q)
            p = np.where(rng.uniform(size=Q) < 0.5, rng.uniform(1, 5, Q), np.inf)
            x, x2 = rng.normal(size=Q), rng.normal(size=Q)
            params = KernelParams(1.7, l, p)
            assert sm_covariance(x, x2, params) == pytest.approx(brute_sm(x, x2, 1.7, l, p), rel=1e-12)

    def test_se_limit_exact(self, rng):
        x, x2 = rng.normal(size=3), rng.normal(size=3)
        l = np.array([0.5, 1.0, 2.0])
        se = 2.0 * np.exp(-np.sum((x - x2) ** 2 / (2 * l**2)))
        assert sm_covariance(x, x2, KernelParams(2.0, l)) == pytest.approx(se, rel=1e-12)

    def test_symmetric_and_stationary(self, rng):
        params = KernelParams(1.3, [0.7, 1.1], [2.5, np.inf])
        x, x2, c = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
        assert sm_covariance(x, x2, params) == sm_covariance(x2, x, params)
        assert sm_covariance(x + c, x2 + c, params) == pytest.approx(sm_covariance(x, x2, params), rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            sm_covariance([0.0, 1.0], [0.0, 1.0], se_params(1))
        with pytest.raises(ValueError):
            sm_covariance([0.0], [0.0, 1.0], se_params(1))


class TestGram:
    def test_single_point(self):
        np.testing.assert_array_equal(gram(np.array([[0.2]]), np.array([[0.2]]), se_params(sigma2=2.5)), [[2.5]])

    def test_identical_points_rank_one(self):
        X = np.array([[0.4, 1.0], [0.4, 1.0]])
        K = gram(X, X, KernelParams(0.8, [1.0, 1.0]))
        np.testing.assert_allclose(K, np.full((2, 2), 0.8))
        assert np.linalg.matrix_rank(K) == 1

    def test_entrywise_and_psd(self, rng):
        X = rng.normal(size=(5, 2))
        params = KernelParams(1.2, [0.8, 1.5])
        K = gram(X, X, params)
        for i in range(5):
            for j in range(5):
                assert K[i, j] == pytest.approx(sm_covariance(X[i], X[j], params), rel=1e-12)
        np.testing.assert_array_equal(K, K.T)
        assert np.linalg.eigvalsh(K).min() >= -1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gram(np.zeros((2, 2)), np.zeros((2, 3)), se_params(2))


class TestFeatureMap:
    def test_scalar_hand_value(self):
        basis = SpectralBasis([[0.5]], [[0.0]], [0.0])
        Phi = feature_map(np.array([[0.3]]), basis, se_params())
        assert Phi[0, 0] == pytest.approx(math.sqrt(2) * math.cos(0.15), rel=1e-12)
        assert Phi[0, 0] == pytest.approx(1.3983, abs=1e-4)

    def test_zero_frequency_column_constant(self, rng):
        M = 4
        Z = rng.normal(size=(M, 2))
        Z[1] = 0.0
        b = rng.uniform(0, 2 * math.pi, M)
        b[1] = 0.0
        Phi = feature_map(rng.normal(size=(6, 2)), SpectralBasis(Z, rng.normal(size=(M, 2)), b), KernelParams(3.0, [1.0, 1.0]))
        np.testing.assert_allclose(Phi[:, 1], math.sqrt(2 * 3.0 / M))

    def test_dimension_mismatch(self):
        basis = SpectralBasis(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            feature_map(np.zeros((3, 1)), basis, se_params(2))

    def test_large_m_approaches_gram(self, rng):
        X = rng.normal(size=(5, 2))
        params = KernelParams(1.0, [1.0, 0.7])
        basis = SpectralBasis.sample(100_000, 2, rng)
        Phi = feature_map(X, basis, params)
        K = gram(X, X, params)
        # relative error on the 5-point set; entries are O(1) so scale by the diagonal
        assert np.max(np.abs(Phi @ Phi.T - K)) / np.max(np.abs(K)) < 0.05

    def test_mean_over_bases_matches_gram_within_3se(self, rng):
        X = rng.normal(size=(4, 1))
        params = se_params()
        draws = np.array(
            [
                (lambda P: P @ P.T)(feature_map(X, SpectralBasis.sample(5, 1, rng), params))
                for _ in range(10_000)
            ]
        )
        mean = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        z = np.abs(mean - gram(X, X, params)) / se
        assert z.max() <= 3.0
