import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from bsps.agents import (BERNOULLI, AgentForecastSet, OlsAgent, bic, bma_weights, fit_ols,
                         linear_design, mixture_mean, quadratic_design, synthesize_bma,
                         synthesize_sa)
from bsps.errors import KindMismatch, LengthMismatch, RankDeficient


class TestForecastSet:
    def test_gaussian_needs_positive_variances(self):
        with pytest.raises(ValueError):
            AgentForecastSet([[1.0]], [[0.0]])
        with pytest.raises(ValueError):
            AgentForecastSet([[1.0]])

    def test_shapes_must_agree(self):
        with pytest.raises(LengthMismatch):
            AgentForecastSet(np.zeros((3, 2)), np.ones((3, 1)))

    def test_bernoulli_range_and_clamp(self):
        with pytest.raises(ValueError):
            AgentForecastSet([[1.2]], kind=BERNOULLI)
        f = AgentForecastSet([[0.0, 1.0]], kind=BERNOULLI)
        c = f.clamped()
        assert c[0, 0] == 1e-9 and c[0, 1] == 1 - 1e-9

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            AgentForecastSet([[0.5]], kind="poisson")


class TestOls:
    def test_exact_linear_fit(self):
        r = np.random.default_rng(0)
        X = np.column_stack([np.ones(20), r.normal(size=(20, 2))])
        y = X @ [1.0, -2.0, 0.5]
        fit = fit_ols(X, y)
        assert fit.s2 < 1e-10
        np.testing.assert_allclose(fit.predict(X)[0], y, atol=1e-10)

    def test_intercept_only(self):
        y = np.array([1.0, 2.0, 4.0, 7.0])
        fit = fit_ols(np.ones((4, 1)), y)
        mean, var = fit.predict(np.ones((1, 1)))
        s2 = np.var(y, ddof=1)
        assert mean[0] == pytest.approx(y.mean())
        assert var[0] == pytest.approx(s2 * (1 + 1 / 4))

    def test_random_problem_matches_normal_equations(self):
        r = np.random.default_rng(1)
        X = r.normal(size=(50, 5))
        y = r.normal(size=50)
        # oracle: LU solve of the normal equations
        ref = linalg.lu_solve(linalg.lu_factor(X.T @ X), X.T @ y)
        np.testing.assert_allclose(fit_ols(X, y).coef, ref, atol=1e-8)

    def test_residuals_orthogonal_to_design(self):
        r = np.random.default_rng(2)
        X = quadratic_design(r.normal(size=(40, 2)))
        y = r.normal(size=40) * 3
        fit = fit_ols(X, y)
        res = y - X @ fit.coef
        assert np.max(np.abs(X.T @ res)) < 1e-8 * np.abs(X).max() * np.abs(y).max()

    def test_rank_deficient(self):
        X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
        with pytest.raises(RankDeficient):
            fit_ols(X, np.arange(10.0))
        with pytest.raises(RankDeficient):
            fit_ols(np.ones((1, 1)), [1.0])

    def test_quadratic_design_columns(self):
        Z = np.array([[2.0, 3.0]])
        np.testing.assert_array_equal(quadratic_design(Z), [[1, 2, 4, 3, 9]])
        np.testing.assert_array_equal(linear_design(Z), [[1, 2, 3]])

    def test_agent_forecast_floor(self):
        r = np.random.default_rng(3)
        Z = r.normal(size=(30, 2))
        ag = OlsAgent().fit(Z, quadratic_design(Z) @ [1, 2, 3, 4, 5])
        mean, var = ag.forecast(Z)
        assert np.all(var >= OlsAgent.min_variance)
        assert ag.rss_on(Z, mean) == 0.0


class TestBic:
    def test_equal_rss_equal_k(self):
        r = np.random.default_rng(4)
        X = np.column_stack([np.ones(30), r.normal(size=30)])
        y = r.normal(size=30)
        f1 = fit_ols(X, y)
        f2 = fit_ols(X[:, ::-1], y)
        assert bic(f1) == pytest.approx(bic(f2), abs=1e-9)

    def test_useless_column_costs_log_n(self):
        r = np.random.default_rng(5)
        n = 40
        X = np.column_stack([np.ones(n), r.normal(size=n)])
        y = r.normal(size=n)
        f1 = fit_ols(X, y)
        # a column orthogonal to y and X: residuals unchanged, one more parameter
        z = r.normal(size=n)
        z -= np.column_stack([X, y]) @ np.linalg.lstsq(np.column_stack([X, y]), z, rcond=None)[0]
        f2 = fit_ols(np.column_stack([X, z]), y)
        assert f2.rss == pytest.approx(f1.rss, rel=1e-10)
        assert bic(f2) - bic(f1) == pytest.approx(np.log(n), rel=1e-8)

    def test_formula(self):
        fit = fit_ols(np.ones((5, 1)), [1.0, 2.0, 3.0, 4.0, 5.0])
        assert bic(fit) == pytest.approx(5 * np.log(10 / 5) + 2 * np.log(5))
        assert bic(fit, n=10, rss=20.0) == pytest.approx(10 * np.log(2) + 2 * np.log(10))


class TestBmaWeights:
    def test_equal_bics_uniform(self):
        np.testing.assert_allclose(bma_weights([3.0, 3.0, 3.0]), 1 / 3)

    def test_gap_of_two_log_99(self):
        w = bma_weights([0.0, 2 * np.log(99)])
        np.testing.assert_allclose(w, [0.99, 0.01], atol=1e-12)

    def test_three_models_high_precision(self):
        gaps = [0, 2, 10]
        with mpmath.workdps(50):
            e = [mpmath.e ** (-mpmath.mpf(g) / 2) for g in gaps]
            ref = [float(v / sum(e)) for v in e]
        np.testing.assert_allclose(bma_weights(gaps), ref, rtol=1e-14)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.integers(-3, 3))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariant(self, bics, shift):
        b = np.array(bics)
        c = float(2 ** shift * 64)
        # shifts that are exact in binary keep the normalized gaps bitwise equal
        if not np.array_equal((b + c) - (b + c).min(), b - b.min()):
            return
        assert np.array_equal(bma_weights(b + c), bma_weights(b))

    def test_rejects_empty_or_nonfinite(self):
        with pytest.raises(ValueError):
            bma_weights([])
        with pytest.raises(ValueError):
            bma_weights([1.0, np.inf])


class TestSynthesis:
    def test_single_agent_identity(self):
        F = AgentForecastSet([[1.0], [2.0]], [[0.5], [0.7]])
        m, v = synthesize_bma(F, [1.0])
        np.testing.assert_array_equal(m, [1.0, 2.0])
        np.testing.assert_allclose(v, [0.5, 0.7])

    def test_equal_means_unchanged(self):
        F = AgentForecastSet([[3.0, 3.0]], [[1.0, 2.0]])
        for w in ([0.1, 0.9], [0.5, 0.5]):
            assert synthesize_bma(F, w)[0][0] == pytest.approx(3.0)

    def test_mixture_moments(self):
        F = AgentForecastSet([[1.0, 2.0]], [[1.0, 1.0]])
        m, v = synthesize_bma(F, [0.3, 0.7])
        assert m[0] == pytest.approx(1.7)
        assert v[0] == pytest.approx(1.21)

    def test_bernoulli_rejected_for_variance(self):
        F = AgentForecastSet([[0.2, 0.6]], kind=BERNOULLI)
        with pytest.raises(KindMismatch):
            synthesize_bma(F, [0.5, 0.5])
        assert mixture_mean(F, [0.5, 0.5])[0] == pytest.approx(0.4)

    def test_weight_checks(self):
        F = AgentForecastSet([[1.0, 2.0]], [[1.0, 1.0]])
        with pytest.raises(LengthMismatch):
            synthesize_bma(F, [1.0])
        with pytest.raises(ValueError):
            synthesize_bma(F, [0.6, 0.6])

    def test_simple_average(self):
        F1 = AgentForecastSet([[2.5]], [[1.0]])
        assert synthesize_sa(F1)[0][0] == 2.5
        F = AgentForecastSet([[0.0, 4.0]], [[1.0, 1.0]])
        assert synthesize_sa(F)[0][0] == 2.0

    @given(st.integers(0, 10_000), st.integers(1, 5))
    @settings(max_examples=30, deadline=None)
    def test_sa_is_uniform_bma(self, seed, J):
        r = np.random.default_rng(seed)
        F = AgentForecastSet(r.normal(size=(7, J)), r.uniform(0.1, 2, (7, J)))
        m1, v1 = synthesize_sa(F)
        m2, v2 = synthesize_bma(F, np.full(J, 1.0 / J))
        assert np.array_equal(m1, m2) and np.array_equal(v1, v2)
