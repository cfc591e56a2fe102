"""Agent predictive distributions, built-in OLS agents, BMA and simple averaging."""
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import KindMismatch, LengthMismatch, RankDeficient

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"
PROB_CLAMP = 1e-9


@dataclass(frozen=True)
class AgentForecastSet:
    """Per-site, per-agent forecasts.

    ``a`` is (n, J): predictive means (gaussian) or event probabilities
    (bernoulli). ``b`` is (n, J) predictive variances, gaussian only.
    """

    a: np.ndarray
    b: np.ndarray = None
    kind: str = GAUSSIAN

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        object.__setattr__(self, "a", a)
        if not np.all(np.isfinite(a)):
            raise ValueError("forecast means/probabilities must be finite")
        if self.kind == GAUSSIAN:
            if self.b is None:
                raise ValueError("gaussian forecasts need variances b")
            b = np.atleast_2d(np.asarray(self.b, dtype=float))
            if b.shape != a.shape:
                raise LengthMismatch(f"a has shape {a.shape} but b has {b.shape}")
            if not np.all(np.isfinite(b)) or np.any(b <= 0):
                raise ValueError("forecast variances must be finite and positive")
            object.__setattr__(self, "b", b)
        elif self.kind == BERNOULLI:
            if np.any((a < 0) | (a > 1)):
                raise ValueError("bernoulli probabilities must lie in [0, 1]")
            object.__setattr__(self, "b", None)
        else:
            raise ValueError(f"unknown forecast kind {self.kind!r}")

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def J(self):
        return self.a.shape[1]

    def subset(self, idx):
        return AgentForecastSet(self.a[idx], None if self.b is None else self.b[idx], self.kind)

    def clamped(self):
        """Probabilities clipped away from 0 and 1 (bernoulli only)."""
        if self.kind != BERNOULLI:
            raise KindMismatch("clamped() applies to bernoulli forecasts")
        return np.clip(self.a, PROB_CLAMP, 1 - PROB_CLAMP)


# ---------------------------------------------------------------------------
# OLS agents


@dataclass(frozen=True)
class OlsFit:
    coef: np.ndarray
    s2: float
    xtx_inv: np.ndarray
    rss: float
    n_obs: int

    @property
    def k(self):
        """Parameter count used by BIC (coefficients plus the variance)."""
        return len(self.coef) + 1

    def predict(self, X):
        """Predictive mean and variance s2 * (1 + x' (X'X)^-1 x) per row."""
        X = np.atleast_2d(X)
        mean = X @ self.coef
        lev = np.einsum("ij,jk,ik->i", X, self.xtx_inv, X)
        return mean, self.s2 * (1.0 + lev)


def fit_ols(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if len(y) != n:
        raise LengthMismatch(f"{n} design rows but {len(y)} responses")
    if n < p + 1:
        raise RankDeficient(f"need at least {p + 1} rows for {p} columns, got {n}")
    xtx = X.T @ X
    try:
        c = linalg.cho_factor(xtx, lower=True)
    except linalg.LinAlgError:
        raise RankDeficient("X'X is not invertible") from None
    if np.linalg.cond(xtx) > 1e13:
        raise RankDeficient("X'X is numerically singular")
    coef = linalg.cho_solve(c, X.T @ y)
    resid = y - X @ coef
    rss = float(resid @ resid)
    xtx_inv = linalg.cho_solve(c, np.eye(p))
    return OlsFit(coef, rss / (n - p), xtx_inv, rss, n)


def quadratic_design(covariates):
    """Rows [1, x1, x1^2, x2, x2^2, ...] for an (n, p) covariate array."""
    Z = np.atleast_2d(np.asarray(covariates, dtype=float))
    cols = [np.ones(len(Z))]
    for k in range(Z.shape[1]):
        cols += [Z[:, k], Z[:, k] ** 2]
    return np.column_stack(cols)


def linear_design(covariates):
    Z = np.atleast_2d(np.asarray(covariates, dtype=float))
    return np.column_stack([np.ones(len(Z)), Z])


class OlsAgent:
    """OLS regression agent on a fixed design map.

    Fit on any subset of rows; predicts with the frequentist predictive
    variance at every row handed to :meth:`forecast`.
    """

    min_variance = 1e-12

    def __init__(self, design=quadratic_design, name="ols"):
        self.design = design
        self.name = name
        self.fit_ = None

    def fit(self, covariates, y):
        self.fit_ = fit_ols(self.design(covariates), y)
        return self

    def forecast(self, covariates):
        mean, var = self.fit_.predict(self.design(covariates))
        return mean, np.maximum(var, self.min_variance)

    def rss_on(self, covariates, y):
        mean, _ = self.fit_.predict(self.design(covariates))
        r = np.asarray(y) - mean
        return float(r @ r)


def bic(fit, n=None, rss=None):
    """Gaussian profile BIC, n ln(RSS/n) + k ln n.

    ``rss`` and ``n`` default to the fit's own training residuals; pass them
    to score the fitted model on a different sample.
    """
    n = fit.n_obs if n is None else n
    rss = fit.rss if rss is None else rss
    return n * np.log(rss / n) + fit.k * np.log(n)


def bma_weights(bics):
    bics = np.asarray(bics, dtype=float)
    if bics.size == 0 or not np.all(np.isfinite(bics)):
        raise ValueError("need at least one finite BIC")
    rel = bics - bics.min()
    w = np.exp(-0.5 * rel)
    return w / w.sum()


def mixture_mean(forecasts, weights):
    w = _check_weights(forecasts, weights)
    return forecasts.a @ w


def synthesize_bma(forecasts, weights):
    """Mixture mean and variance of weighted gaussian forecasts."""
    if forecasts.kind != GAUSSIAN:
        raise KindMismatch("mixture variance is defined for gaussian forecasts only; "
                           "use mixture_mean for bernoulli")
    w = _check_weights(forecasts, weights)
    a, b = forecasts.a, forecasts.b
    mean = a @ w
    var = (b + a * a) @ w - mean * mean
    return mean, np.maximum(var, 0.0)


def synthesize_sa(forecasts):
    J = forecasts.J
    return synthesize_bma(forecasts, np.full(J, 1.0 / J))


def _check_weights(forecasts, weights):
    w = np.asarray(weights, dtype=float)
    if w.shape != (forecasts.J,):
        raise LengthMismatch(f"expected {forecasts.J} weights, got {w.shape}")
    if not np.isclose(w.sum(), 1.0, atol=1e-9):
        raise ValueError("weights must sum to 1")
    return w
