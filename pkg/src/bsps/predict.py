"""Posterior predictive draws at unobserved sites and their summaries.

Quantiles use linear interpolation between order statistics (numpy's
default "linear" method, Hyndman-Fan type 7).
"""
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import expit

from .agents import BERNOULLI, GAUSSIAN
from .errors import KindMismatch, LengthMismatch
from .spatial import _as_coords, chol_factor, pairwise_distances


@dataclass(frozen=True)
class PredictiveDraws:
    y: np.ndarray        # (K, n_new): response draws, or success probabilities
    beta: np.ndarray     # (K, n_new, J + 1)
    kind: str = GAUSSIAN

    @property
    def n_draws(self):
        return self.y.shape[0]


@dataclass(frozen=True)
class PredictiveSummary:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float


class _KrigingCache:
    """Per-range factor L of G(g) and W = L^-1 k(new)^T, least recently used
    entries evicted."""

    def __init__(self, train, new, size=64):
        self.d_train = pairwise_distances(train)
        self.d_cross = cdist(new, train)
        self.size = size
        self._d = OrderedDict()

    def get(self, g):
        key = float(g)
        hit = self._d.get(key)
        if hit is not None:
            self._d.move_to_end(key)
            return hit
        L = chol_factor(np.exp(-self.d_train / key), jitter=0.0)
        W = linalg.solve_triangular(L, np.exp(-self.d_cross.T / key),
                                    lower=True, check_finite=False)
        unit_var = np.clip(1.0 - np.sum(W * W, axis=0), 0.0, 1.0)
        hit = (L, W, unit_var)
        self._d[key] = hit
        if len(self._d) > self.size:
            self._d.popitem(last=False)
        return hit


def predictive_draws(samples, new_sites, forecasts_at_new, rng=None):
    """One predictive draw per retained posterior draw.

    Coefficients at new sites come from the full-GP kriging conditional given
    the draw's field, tau and range, whatever backend produced the chain.
    """
    rng = np.random.default_rng(rng)
    new = _as_coords(new_sites)
    if forecasts_at_new.n != len(new):
        raise LengthMismatch(f"{len(new)} new sites but forecasts for {forecasts_at_new.n}")
    if forecasts_at_new.J != samples.J:
        raise LengthMismatch(f"chain has {samples.J} agents, forecasts have {forecasts_at_new.J}")
    if forecasts_at_new.kind != samples.kind:
        raise KindMismatch("forecast kind differs from the fitted chain")
    K, J, m = samples.n_draws, samples.J, len(new)
    bb = np.asarray(samples.priors.beta_bar, dtype=float)
    cache = _KrigingCache(samples.sites.coords, new)
    a = forecasts_at_new.a
    binary = samples.kind == BERNOULLI
    if binary:
        prob = forecasts_at_new.a
    else:
        sd_f = np.sqrt(forecasts_at_new.b)

    beta_new = np.empty((K, m, J + 1))
    y = np.empty((K, m))
    for k in range(K):
        for j in range(J + 1):
            L, W, unit_var = cache.get(samples.g[k, j])
            u = linalg.solve_triangular(L, samples.beta[k, :, j] - bb[j], lower=True,
                                        check_finite=False)
            mean = bb[j] + W.T @ u
            sd = np.sqrt(samples.tau[k, j] * unit_var)
            beta_new[k, :, j] = mean + sd * rng.standard_normal(m)
        if binary:
            f = (rng.random((m, J)) < prob).astype(float)
        else:
            f = a + sd_f * rng.standard_normal((m, J))
        psi = beta_new[k, :, 0] + np.sum(beta_new[k, :, 1:] * f, axis=1)
        if binary:
            y[k] = expit(psi)
        else:
            y[k] = psi + np.sqrt(samples.sigma2[k]) * rng.standard_normal(m)
    return PredictiveDraws(y, beta_new, samples.kind)


def summarize(draws, alpha=0.05):
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    y = draws.y if isinstance(draws, PredictiveDraws) else np.asarray(draws, dtype=float)
    if y.shape[0] < 2:
        raise ValueError("need at least two draws per site")
    lo, hi = np.quantile(y, [alpha / 2, 1 - alpha / 2], axis=0, method="linear")
    return PredictiveSummary(y.mean(axis=0), lo, hi, alpha)


def weight_ratio_map(samples_or_beta, j, k):
    """|b_j| / (|b_j| + |b_k|) of posterior-mean coefficient fields; 0.5 where
    both vanish."""
    if j == k:
        raise ValueError("need two distinct agents")
    bm = samples_or_beta.beta_mean() if hasattr(samples_or_beta, "beta_mean") \
        else np.asarray(samples_or_beta, dtype=float)
    if not (1 <= j < bm.shape[1] and 1 <= k < bm.shape[1]):
        raise ValueError(f"agent indices must lie in 1..{bm.shape[1] - 1}")
    num = np.abs(bm[:, j])
    den = num + np.abs(bm[:, k])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den == 0, 0.5, num / np.where(den == 0, 1.0, den))


def weight_shares(beta_mean):
    """|b_j| / sum_k |b_k| over the agent fields (intercept excluded)."""
    w = np.abs(np.asarray(beta_mean, dtype=float)[:, 1:])
    tot = w.sum(axis=1, keepdims=True)
    J = w.shape[1]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot == 0, 1.0 / max(J, 1), w / np.where(tot == 0, 1.0, tot))
