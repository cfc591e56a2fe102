import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bsps import gibbs, logistic
from bsps.agents import BERNOULLI, AgentForecastSet
from bsps.gibbs import ChainConfig, FullGPBackend, PriorConfig, SynthesisState
from bsps.logistic import (factor_posterior_prob, pg_mean, run_chain_binary, sample_pg,
                           update_beta_logistic, update_factor_bernoulli, update_omega)
from bsps.spatial import ExpKernel, SiteSet, corr_matrix

from conftest import batch_means_se
from test_gibbs import FixedNormals, dense_field_conditional

K_TERMS = 200_000


def series_moments(c):
    """PG(1, c) as (1 / 2 pi^2) sum_k g_k / ((k - 1/2)^2 + c^2 / (4 pi^2)), g_k ~ Exp(1)."""
    k = np.arange(1, K_TERMS + 1, dtype=float)
    d = (k - 0.5) ** 2 + c * c / (4 * np.pi ** 2)
    mean = np.sum(1 / d) / (2 * np.pi ** 2)
    var = np.sum(1 / d ** 2) / (4 * np.pi ** 4)
    return mean, var


def psi_draws(s):
    return s.beta[:, :, 0] + np.einsum("kij,kij->ki", s.f, s.beta[:, :, 1:])


class TestPolyaGamma:
    def test_series_oracle_agrees_with_closed_form(self):
        # the oracle itself: tanh(c/2)/(2c) and its c -> 0 limit
        assert series_moments(0.0)[0] == pytest.approx(0.25, rel=1e-5)
        assert series_moments(2.0)[0] == pytest.approx(np.tanh(1) / 4, rel=1e-5)
        assert np.tanh(1) / 4 == pytest.approx(0.19040, abs=1e-5)

    @pytest.mark.parametrize("c", [0.0, 2.0])
    def test_mean_examples(self, c):
        d = sample_pg(c, np.random.default_rng(1), size=1_000_000)
        assert d.mean() == pytest.approx(series_moments(c)[0], rel=0.01)

    @pytest.mark.parametrize("c", [0.1, 1.0, 2.0, 5.0])
    def test_mean_and_variance(self, c):
        d = sample_pg(c, np.random.default_rng(int(10 * c)), size=1_000_000)
        m, v = series_moments(c)
        assert d.mean() == pytest.approx(m, rel=0.01)
        assert d.var() == pytest.approx(v, rel=0.03)
        assert np.all(d > 0)

    def test_symmetric_in_tilt(self):
        r = np.random.default_rng(7)
        a = sample_pg(1.5, r, size=100_000)
        b = sample_pg(-1.5, r, size=100_000)
        assert stats.ks_2samp(a, b).statistic < 0.01

    def test_closed_form_mean(self):
        np.testing.assert_allclose(pg_mean([0.0, 1e-8, 2.0, -2.0]),
                                   [0.25, 0.25, np.tanh(1) / 4, np.tanh(1) / 4])

    def test_scalar_and_array(self):
        r = np.random.default_rng(0)
        assert isinstance(sample_pg(1.0, r), float)
        assert sample_pg(np.zeros((3, 4)), r).shape == (3, 4)
        with pytest.raises(ValueError):
            sample_pg(np.inf, r)


class TestUpdateOmega:
    def _state(self, psi):
        n = len(psi)
        return SynthesisState(np.zeros((n, 0)), np.asarray(psi, float)[:, None], np.nan,
                              np.ones(1), np.ones(1))

    def test_zero_predictor(self):
        w = update_omega(self._state(np.zeros(100_000)), np.random.default_rng(0))
        assert w.mean() == pytest.approx(0.25, rel=0.01)

    def test_large_predictor(self):
        w = update_omega(self._state(np.full(100_000, 10.0)), np.random.default_rng(1))
        assert np.tanh(5) / 20 == pytest.approx(0.049995, abs=1e-6)
        assert w.mean() == pytest.approx(np.tanh(5) / 20, rel=0.02)

    def test_equal_predictors_identically_distributed(self):
        w = update_omega(self._state(np.tile([0.7, 0.7], 50_000)), np.random.default_rng(2))
        assert stats.ks_2samp(w[0::2], w[1::2]).statistic < 0.015


class TestUpdateBetaLogistic:
    def test_single_site_intercept(self):
        y, omega, tau = 1.0, 0.8, 2.0
        P = omega + 1 / tau
        st = SynthesisState(np.zeros((1, 0)), np.zeros((1, 1)), np.nan, np.array([tau]),
                            np.ones(1))
        be = FullGPBackend(SiteSet([(0, 0)]), 1)
        be.refresh(0, 0.5)
        pri = PriorConfig(g_lo=0.1, g_hi=1.0, beta_bar=(0.0,))
        out = update_beta_logistic(st, np.array([y]), np.array([omega]), pri, be,
                                   FixedNormals([0.0]))
        assert out[0, 0] == pytest.approx((y - 0.5) / P, abs=1e-12)

    def test_dense_oracle(self):
        r = np.random.default_rng(3)
        n = 8
        sites = SiteSet(r.uniform(0, 1, (n, 2)))
        f = (r.random((n, 1)) < 0.5).astype(float)
        beta = r.normal(size=(n, 2))
        y = (r.random(n) < 0.5).astype(float)
        omega = r.uniform(0.1, 0.4, n)
        tau = np.array([0.9, 0.6])
        st = SynthesisState(f, beta, np.nan, tau, np.array([0.3, 0.5]))
        be = FullGPBackend(sites, 2)
        be.refresh(0, 0.3)
        be.refresh(1, 0.5)
        pri = PriorConfig(g_lo=0.1, g_hi=1.0, beta_bar=(0.0, 1.0))
        out = update_beta_logistic(st, y, omega, pri, be, FixedNormals(np.zeros(n)))
        fmat = np.column_stack([np.ones(n), f])
        ref = beta.copy()
        for j, g in enumerate((0.3, 0.5)):
            G = corr_matrix(sites, ExpKernel(g))
            ref[:, j], _ = dense_field_conditional(ref, fmat, omega, (y - 0.5) / omega, j,
                                                   pri.beta_bar[j], tau[j], G)
        np.testing.assert_allclose(out, ref, atol=1e-8)

    def test_vanishing_weights_give_prior(self):
        r = np.random.default_rng(4)
        n = 5
        sites = SiteSet(r.uniform(0, 1, (n, 2)))
        G = corr_matrix(sites, ExpKernel(0.4))
        mean, cov = dense_field_conditional(np.zeros((n, 1)), np.ones((n, 1)), np.full(n, 1e-12),
                                            np.zeros(n), 0, 0.3, 0.8, G)
        np.testing.assert_allclose(mean, 0.3, atol=1e-8)
        np.testing.assert_allclose(cov, 0.8 * G, atol=1e-8)
        st = SynthesisState(np.zeros((n, 0)), np.zeros((n, 1)), np.nan, np.array([0.8]),
                            np.array([0.4]))
        be = FullGPBackend(sites, 1)
        be.refresh(0, 0.4)
        pri = PriorConfig(g_lo=0.1, g_hi=1.0, beta_bar=(0.3,))
        out = update_beta_logistic(st, np.full(n, 0.5), np.full(n, 1e-12), pri, be,
                                   FixedNormals(np.zeros(n)))
        np.testing.assert_allclose(out[:, 0], 0.3, atol=1e-8)


class TestFactorBernoulli:
    def _state(self, beta0, beta1, f=0.0):
        return SynthesisState(np.array([[f]]), np.array([[beta0, beta1]]), np.nan,
                              np.ones(2), np.ones(2))

    def test_hand_values(self):
        F = AgentForecastSet([[0.5]], kind=BERNOULLI)
        p = factor_posterior_prob(self._state(0.0, 1.0), np.array([1.0]), F, 1)
        L = (1 + np.e) / (2 * np.e)
        assert L == pytest.approx(0.6839, abs=1e-4)
        assert p[0] == pytest.approx(0.5 / (0.5 + 0.5 * L), abs=1e-12)
        assert p[0] == pytest.approx(0.594, abs=1e-3)

    def test_irrelevant_factor(self):
        F = AgentForecastSet([[0.37]], kind=BERNOULLI)
        p = factor_posterior_prob(self._state(0.4, 0.0), np.array([1.0]), F, 1)
        assert p[0] == pytest.approx(0.37, abs=1e-12)

    def test_hard_zero_and_one(self):
        F = AgentForecastSet([[0.0, 1.0]] * 50, kind=BERNOULLI)
        st = SynthesisState(np.tile([1.0, 0.0], (50, 1)), np.tile([0.0, -3.0, -3.0], (50, 1)),
                            np.nan, np.ones(3), np.ones(3))
        f = update_factor_bernoulli(st, np.ones(50), F, np.random.default_rng(0))
        assert np.all(f[:, 0] == 0) and np.all(f[:, 1] == 1)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([0.0, 1.0]),
           st.floats(0.01, 0.98), st.floats(0.001, 0.01))
    @settings(max_examples=80, deadline=None)
    def test_probability_bounded_and_monotone(self, b0, b1, y, a, da):
        lo = factor_posterior_prob(self._state(b0, b1), np.array([y]),
                                   AgentForecastSet([[a]], kind=BERNOULLI), 1)[0]
        hi = factor_posterior_prob(self._state(b0, b1), np.array([y]),
                                   AgentForecastSet([[a + da]], kind=BERNOULLI), 1)[0]
        assert 0 <= lo <= 1 and 0 <= hi <= 1
        assert hi >= lo


def binary_problem(n=10, seed=0, all_ones=False):
    r = np.random.default_rng(seed)
    sites = SiteSet(r.uniform(0, 1, (n, 2)))
    a = r.uniform(0.2, 0.8, (n, 1))
    y = np.ones(n) if all_ones else (r.random(n) < a[:, 0]).astype(float)
    return sites, y, AgentForecastSet(a, kind=BERNOULLI)


class TestRunChainBinary:
    def test_shared_updates(self):
        assert logistic.update_tau is gibbs.update_tau
        assert logistic.update_g_mh is gibbs.update_g_mh

    def test_all_successes_positive_predictor(self):
        sites, y, F = binary_problem(all_ones=True)
        pri = PriorConfig(a_tau=5.0, b_tau=5.0, beta_bar=(1.0, 1.0))
        s = run_chain_binary(y, F, sites, pri, ChainConfig(n_burn=300, n_keep=700, seed=1))
        assert np.all(psi_draws(s).mean(axis=0) > 0)
        assert np.all(s.omega > 0)

    def test_seeded(self):
        sites, y, F = binary_problem(n=6)
        cfg = ChainConfig(n_burn=10, n_keep=20, seed=3)
        a, b = run_chain_binary(y, F, sites, config=cfg), run_chain_binary(y, F, sites, config=cfg)
        assert np.array_equal(a.beta, b.beta) and np.array_equal(a.omega, b.omega)

    def test_against_long_reference(self):
        sites, y, F = binary_problem(seed=5)
        pri = PriorConfig(a_tau=3.0, b_tau=1.0)
        short = psi_draws(run_chain_binary(y, F, sites, pri,
                                           ChainConfig(n_burn=1000, n_keep=3000, seed=1)))
        ref = psi_draws(run_chain_binary(y, F, sites, pri,
                                         ChainConfig(n_burn=1000, n_keep=30_000, seed=2)))
        for i in range(len(y)):
            se = np.hypot(batch_means_se(short[:, i]), batch_means_se(ref[:, i]))
            assert abs(short[:, i].mean() - ref[:, i].mean()) < 3 * se

    def test_guards(self):
        sites, y, F = binary_problem(n=4)
        with pytest.raises(ValueError):
            run_chain_binary(np.array([0, 1, 2, 1.0]), F, sites,
                             config=ChainConfig(n_burn=0, n_keep=1))
