import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from drgp.psi_statistics import GaussianSpectral
from drgp.recurrent_state import VARIANTS, assemble_regressors
from drgp.revarb_bound import (
    LayerSums,
    bound_explicit_weights,
    bound_ip_opt,
    bound_ss_vss_opt,
    collapsed_layer_term,
    evidence_bound,
    explicit_layer_term,
    kl_spectral,
    layer_sums,
    optimal_weights,
    set_optimal_weights,
    state_terms,
    trace_kinv,
)
from drgp.spectral_kernel import gram
from drgp._backend import jitter_cholesky
from oracles import direct_bound, random_model


class TestKlSpectral:
    @pytest.mark.parametrize(
        "alpha, beta, expected",
        [(0.0, 1.0, 0.0), (1.0, 1.0, 0.5), (0.0, 2.0, 1.0 - 0.5 * math.log(2.0) - 0.5)],
    )
    def test_scalar_values(self, alpha, beta, expected):
        assert kl_spectral(GaussianSpectral([[alpha]], [[beta]])) == pytest.approx(expected, abs=1e-15)

    def test_hand_value(self):
        assert kl_spectral(GaussianSpectral([[0.0]], [[2.0]])) == pytest.approx(0.1534, abs=1e-4)

    def test_sums_over_entries(self, rng):
        a, b = rng.normal(size=(3, 2)), rng.uniform(0.1, 2, (3, 2))
        direct = sum(0.5 * (bb + aa * aa - 1 - math.log(bb)) for aa, bb in zip(a.ravel(), b.ravel()))
        assert kl_spectral(GaussianSpectral(a, b)) == pytest.approx(direct, rel=1e-12)


class TestStateTerms:
    def test_matches_direct_sum(self):
        model = random_model(L=2, H_h=2, H_x=3, N=10)
        for l in (1, 2):
            v = model.layers[l - 1].var
            direct = sum(0.5 * math.log(2 * math.pi * s) + 0.5 for s in v.state_lam)
            direct += sum(-0.5 * math.log(2 * math.pi) - 0.5 * (s + m * m) for m, s in zip(v.state_mu[:2], v.state_lam[:2]))
            assert state_terms(model, l) == pytest.approx(direct, rel=1e-12)

    def test_window_mean_shift(self):
        model = random_model(H_h=1)
        before = state_terms(model, 1)
        old = model.layers[0].var.state_mu[0]
        model.layers[0].var.state_mu[0] = old + 0.7
        delta = state_terms(model, 1) - before
        assert delta == pytest.approx(-((old + 0.7) ** 2 - old**2) / 2, rel=1e-10)

    def test_output_layer_has_no_states(self):
        with pytest.raises(ValueError):
            state_terms(random_model(), 2)


class TestCollapsedBound:
    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("L, H", [(1, 1), (2, 2)])
    def test_matches_direct_oracle(self, variant, L, H):
        model = random_model(variant=variant, L=L, H_x=H, H_h=H, M=4, N=14, seed=L + H)
        expected, _ = direct_bound(model)
        assert evidence_bound(model).total == pytest.approx(expected, rel=1e-8)

    def test_exact_marginal_likelihood_for_deterministic_features(self, rng):
        n, M = 8, 3
        Phi = rng.normal(size=(n, M))
        t = rng.normal(size=n)
        model = random_model(M=M)
        s2 = float(model.layers[1].params.sigma_noise2)
        sums = LayerSums(Phi.T @ t, Phi.T @ Phi, None, float(t @ t), n, 0.0)
        exact = multivariate_normal(np.zeros(n), Phi @ Phi.T + s2 * np.eye(n)).logpdf(t)
        assert collapsed_layer_term(sums, model, 2) == pytest.approx(exact, rel=1e-10)

    def test_feature_permutation_invariance(self, rng):
        for variant in ("SS", "VSS-IP-2"):
            model = random_model(variant=variant, M=5, seed=4)
            perm = rng.permutation(5)
            other = model.copy()
            for layer in other.layers:
                bs = layer.basis
                layer.basis = type(bs)(bs.Z[perm], bs.U[perm], bs.b[perm])
                if layer.var.spectral is not None:
                    sp = layer.var.spectral
                    layer.var.spectral = GaussianSpectral(sp.alpha[perm], sp.beta[perm])
            assert evidence_bound(other).total == pytest.approx(evidence_bound(model).total, rel=1e-10)

    def test_vss_collapses_to_ss(self):
        model = random_model(variant="VSS", L=2, seed=8)
        ss = model.copy()
        ss.variant = "SS"
        for layer in model.layers:
            layer.var.spectral = GaussianSpectral(layer.basis.Z.copy(), np.full(layer.basis.Z.shape, 1e-12))
        kl = sum(float(kl_spectral(layer.var.spectral)) for layer in model.layers)
        vss_data = evidence_bound(model).total + kl
        assert vss_data == pytest.approx(evidence_bound(ss).total, rel=1e-5)

    def test_nystrom_residual_nonnegative(self):
        for seed in range(5):
            model = random_model(variant="SS-IP-1", M=6, seed=seed)
            for l, layer in enumerate(model.layers, start=1):
                sums = layer_sums(model, l)
                K = gram(layer.basis.U, layer.basis.U, layer.params)
                chol, _ = jitter_cholesky(K, start=1e-6)
                resid = sums.count * layer.params.sigma_power2 - trace_kinv(np, chol, sums.psi_reg)
                assert resid >= -1e-6

    def test_ip1_differs_from_ss_by_residual_terms(self):
        model = random_model(variant="SS-IP-1", L=2, seed=9)
        ss = model.copy()
        ss.variant = "SS"
        total, _ = direct_bound(model, include_ip_terms=False)
        assert total == pytest.approx(evidence_bound(ss).total, rel=1e-10)
        assert evidence_bound(model).total <= evidence_bound(ss).total + 1e-8

    def test_variant_entry_points(self):
        with pytest.raises(ValueError):
            bound_ss_vss_opt(random_model(variant="SS-IP-2"))
        with pytest.raises(ValueError):
            bound_ip_opt(random_model(variant="VSS"))
        with pytest.raises(ValueError):
            bound_ip_opt(random_model(variant="SS-IP-1"), variant="IP-2")
        m = random_model(variant="SS-IP-2")
        assert bound_ip_opt(m, variant="IP-2").total == evidence_bound(m).total

    def test_replacement_data_length_checked(self):
        model = random_model(N=12)
        with pytest.raises(ValueError):
            evidence_bound(model, y=np.zeros(11))

    def test_decomposition_adds_up(self):
        b = evidence_bound(random_model(variant="VSS", L=2))
        assert b.total == pytest.approx(sum(b.per_layer) - b.kl_spectral - b.kl_states, rel=1e-12)


class TestExplicitWeights:
    @pytest.mark.parametrize("variant", ["SS", "VSS"])
    def test_optimum_equals_collapsed(self, variant):
        model = set_optimal_weights(random_model(variant=variant, L=2, seed=1))
        assert bound_explicit_weights(model).total == pytest.approx(evidence_bound(model).total, rel=1e-8)

    @pytest.mark.parametrize("variant", ["SS", "VSS"])
    def test_random_posteriors_do_not_exceed_collapsed(self, variant, rng):
        model = random_model(variant=variant, seed=2)
        collapsed = evidence_bound(model).total
        M = model.M
        for _ in range(20):
            for layer in model.layers:
                B = rng.normal(size=(M, M)) * 0.3
                layer.var.weights_m = rng.normal(size=M)
                layer.var.weights_s = B @ B.T + 0.01 * np.eye(M) if rng.uniform() < 0.5 else rng.uniform(0.01, 2, M)
            assert bound_explicit_weights(model).total <= collapsed + 1e-9

    def test_prior_posterior_has_zero_weight_kl(self):
        model = random_model(M=3)
        sums = layer_sums(model, 2)
        M = 3
        with_prior = explicit_layer_term(sums, model, 2, np.zeros(M), np.ones(M))
        s2 = float(model.layers[1].params.sigma_noise2)
        fit = -0.5 * sums.count * (math.log(2 * math.pi) + math.log(s2)) - 0.5 * sums.tt / s2 - 0.5 * np.trace(sums.psi2) / s2
        assert with_prior == pytest.approx(fit, rel=1e-12)

    def test_optimal_weights_solve_normal_equations(self):
        model = random_model(M=4)
        sums = layer_sums(model, 2)
        m, s = optimal_weights(sums, model, 2)
        s2 = float(model.layers[1].params.sigma_noise2)
        A = sums.psi2 + s2 * np.eye(4)
        np.testing.assert_allclose(A @ m, sums.c, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(s @ A, s2 * np.eye(4), atol=1e-10)

    def test_errors(self):
        model = random_model(M=3)
        sums = layer_sums(model, 2)
        with pytest.raises(ValueError):
            explicit_layer_term(sums, model, 2, np.zeros(2), np.ones(3))
        with pytest.raises(ValueError):
            explicit_layer_term(sums, model, 2, np.zeros(3), np.array([1.0, 0.0, 1.0]))
        with pytest.raises(ValueError):
            bound_explicit_weights(model)
        with pytest.raises(ValueError):
            bound_explicit_weights(random_model(variant="SS-IP-1"))


def test_regressor_assembly_used_by_bound_is_shared():
    model = random_model(L=2)
    assert layer_sums(model, 2).count == assemble_regressors(model, layer=2).N
