"""Mean-field variational Bayes for the gaussian synthesis model.

Variational family: q(f_ji) = N(m_ji, s2_ji), q(beta_j) = N(mu_j, Sigma_j),
q(tau_j) = IG(a_tau_j, b_tau_j), q(g_j) discrete on a range grid with
probabilities p_j, q(sigma2) = IG(a_sigma, b_sigma). Each sweep applies the
closed-form coordinate updates in a fixed order, so the ELBO never
decreases.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy import linalg
from scipy.special import digamma, gammaln

from .agents import GAUSSIAN
from .errors import KindMismatch, NotPositiveDefinite
from .gibbs import PriorConfig
from .spatial import ExpKernel, SiteSet, chol_factor, chol_logdet, corr_matrix, cross_corr

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RangeGrid:
    eta: np.ndarray

    def __post_init__(self):
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if eta.size < 1 or np.any(eta <= 0) or np.any(np.diff(eta) <= 0):
            raise ValueError("grid must be non-empty, positive and strictly increasing")
        object.__setattr__(self, "eta", eta)

    @classmethod
    def log_spaced(cls, lo, hi, size=20):
        if size == 1:
            return cls(np.array([np.sqrt(lo * hi)]))
        return cls(np.geomspace(lo, hi, size))

    @property
    def L(self):
        return len(self.eta)


@dataclass
class VariationalState:
    m: np.ndarray          # (n, J)
    s2: np.ndarray         # (n, J)
    mu: np.ndarray         # (J + 1, n)
    Sigma: np.ndarray      # (J + 1, n, n)
    a_tau: np.ndarray      # (J + 1,)
    b_tau: np.ndarray
    p: np.ndarray          # (J + 1, L)
    a_sigma: float
    b_sigma: float

    def copy(self):
        return VariationalState(self.m.copy(), self.s2.copy(), self.mu.copy(),
                                self.Sigma.copy(), self.a_tau.copy(), self.b_tau.copy(),
                                self.p.copy(), float(self.a_sigma), float(self.b_sigma))

    @property
    def inv_sigma2(self):
        return self.a_sigma / self.b_sigma

    @property
    def inv_tau(self):
        return self.a_tau / self.b_tau


class GridPrecisions:
    """G(eta_l)^-1 and log|G(eta_l)| for every grid point."""

    def __init__(self, sites, grid):
        self.grid = grid
        n = sites.n
        self.inv = np.empty((grid.L, n, n))
        self.logdet = np.empty(grid.L)
        eye = np.eye(n)
        for l, g in enumerate(grid.eta):
            L = chol_factor(corr_matrix(sites, ExpKernel(g)), jitter=0.0)
            self.inv[l] = linalg.cho_solve((L, True), eye, check_finite=False)
            self.logdet[l] = chol_logdet(L)

    def expected(self, p):
        """sum_l p_l G(eta_l)^-1"""
        return np.tensordot(p, self.inv, axes=1)

    def traces(self, S):
        """tr(S G(eta_l)^-1) for every l (S symmetric)."""
        return np.tensordot(self.inv, S, axes=([1, 2], [0, 1]))


@dataclass
class VBResult:
    state: VariationalState
    n_iter: int
    converged: bool
    elbo: list = field(default_factory=list)
    grid: RangeGrid = None
    sites: SiteSet = None
    priors: PriorConfig = None


def _second_moment_centered(state, j, beta_bar_j):
    d = state.mu[j] - beta_bar_j
    return state.Sigma[j] + np.outer(d, d)


def init_state(y, forecasts, priors, grid, precs):
    """Prior-based starting values (agent means for the factors, prior means
    for the fields, prior-mode scales, uniform range probabilities)."""
    n, J = forecasts.a.shape
    tau0 = priors.b_tau / (priors.a_tau + 1.0)
    mid = grid.L // 2
    G_mid = np.linalg.inv(precs.inv[mid])
    G_mid = 0.5 * (G_mid + G_mid.T)
    a_tau = np.full(J + 1, priors.a_tau + 0.5 * n)
    a_sigma = priors.a_sigma + 0.5 * n
    sig2 = max(float(np.var(y, ddof=1)) if n > 1 else 0.0, 1e-6)
    return VariationalState(
        m=forecasts.a.copy(),
        s2=forecasts.b.copy(),
        mu=np.repeat(np.asarray(priors.beta_bar, dtype=float)[:, None], n, axis=1),
        Sigma=np.stack([tau0 * G_mid] * (J + 1)),
        a_tau=a_tau,
        b_tau=a_tau * tau0,
        p=np.full((J + 1, grid.L), 1.0 / grid.L),
        a_sigma=a_sigma,
        b_sigma=a_sigma * sig2,
    )


def init_from_samples(samples, grid):
    """Warm start from the moments of a (short) MCMC run."""
    f, beta = samples.f, samples.beta
    n = beta.shape[1]
    priors = samples.priors
    p = np.empty((beta.shape[2], grid.L))
    for j in range(beta.shape[2]):
        nearest = np.abs(np.log(samples.g[:, j])[:, None] - np.log(grid.eta)[None]).argmin(1)
        counts = np.bincount(nearest, minlength=grid.L) + 0.5
        p[j] = counts / counts.sum()
    a_tau = np.full(beta.shape[2], priors.a_tau + 0.5 * n)
    a_sigma = priors.a_sigma + 0.5 * n
    return VariationalState(
        m=f.mean(0), s2=np.maximum(f.var(0), 1e-10),
        mu=beta.mean(0).T.copy(),
        Sigma=np.stack([np.diag(np.maximum(beta[:, :, j].var(0), 1e-10))
                        for j in range(beta.shape[2])]),
        a_tau=a_tau, b_tau=a_tau * samples.tau.mean(0),
        p=p, a_sigma=a_sigma, b_sigma=a_sigma * float(samples.sigma2.mean()),
    )


def expected_sq_resid(state, y):
    """I_q: sum_i E_q[(y_i - beta_0i - sum_j beta_ji f_ji)^2]."""
    mu, m = state.mu, state.m
    r = y - mu[0] - np.sum(mu[1:].T * m, axis=1)
    dS = np.einsum("jii->ji", state.Sigma)
    Eb2 = mu[1:].T ** 2 + dS[1:].T
    Ef2 = m ** 2 + state.s2
    return float(r @ r + dS[0].sum() + np.sum(Eb2 * Ef2 - (mu[1:].T * m) ** 2))


def vb_sweep(state, y, forecasts, priors, precs, logdets_out=None):
    """One full coordinate sweep; returns a new state."""
    st = state.copy()
    n, J = st.m.shape
    a, b = forecasts.a, forecasts.b
    bb = np.asarray(priors.beta_bar, dtype=float)
    es = st.inv_sigma2

    # factors, j = 1..J
    for j in range(1, J + 1):
        k = j - 1
        fit_others = st.mu[0] + np.sum(st.mu[1:].T * st.m, axis=1) - st.mu[j] * st.m[:, k]
        Eb2 = st.mu[j] ** 2 + np.diagonal(st.Sigma[j])
        s2 = 1.0 / (1.0 / b[:, k] + Eb2 * es)
        st.s2[:, k] = s2
        st.m[:, k] = s2 * (a[:, k] / b[:, k] + st.mu[j] * es * (y - fit_others))

    # coefficient fields, j = 0..J
    Ef = np.column_stack([np.ones(n), st.m])
    Ef2 = np.column_stack([np.ones(n), st.m ** 2 + st.s2])
    logdet_sigma = np.empty(J + 1)
    for j in range(J + 1):
        Kinv = precs.expected(st.p[j]) * st.inv_tau[j]
        fitted = np.sum(st.mu.T * Ef, axis=1) - st.mu[j] * Ef[:, j]
        P = Kinv.copy()
        P[np.diag_indices(n)] += es * Ef2[:, j]
        rhs = es * Ef[:, j] * (y - fitted) + Kinv.sum(axis=1) * bb[j]
        try:
            L = linalg.cholesky(P, lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise NotPositiveDefinite(f"variational precision for field {j}") from None
        Linv = linalg.solve_triangular(L, np.eye(n), lower=True, check_finite=False)
        st.Sigma[j] = Linv.T @ Linv
        st.mu[j] = st.Sigma[j] @ rhs
        logdet_sigma[j] = -chol_logdet(L)

    # scales
    traces = np.empty((J + 1, precs.grid.L))
    for j in range(J + 1):
        traces[j] = precs.traces(_second_moment_centered(st, j, bb[j]))
        st.a_tau[j] = priors.a_tau + 0.5 * n
        st.b_tau[j] = priors.b_tau + 0.5 * float(st.p[j] @ traces[j])

    # range probabilities
    for j in range(J + 1):
        logit = -0.5 * precs.logdet - 0.5 * st.inv_tau[j] * traces[j]
        w = np.exp(logit - logit.max())
        st.p[j] = w / w.sum()

    # noise variance
    st.a_sigma = priors.a_sigma + 0.5 * n
    st.b_sigma = priors.b_sigma + 0.5 * expected_sq_resid(st, y)
    if logdets_out is not None:
        logdets_out[:] = logdet_sigma
    return st


def _ig_entropy(a, b):
    return a + np.log(b) + gammaln(a) - (1.0 + a) * digamma(a)


def _ig_expected_logpdf(a0, b0, a, b):
    """E_q[log IG(x; a0, b0)] under q = IG(a, b)."""
    e_log = np.log(b) - digamma(a)
    e_inv = a / b
    return a0 * np.log(b0) - gammaln(a0) - (a0 + 1.0) * e_log - b0 * e_inv


def elbo(state, y, forecasts, priors, precs, logdet_sigma=None):
    n, J = state.m.shape
    bb = np.asarray(priors.beta_bar, dtype=float)
    a, b = forecasts.a, forecasts.b
    e_log_s = np.log(state.b_sigma) - digamma(state.a_sigma)
    e_log_t = np.log(state.b_tau) - digamma(state.a_tau)
    log2pi = np.log(2 * np.pi)

    val = -0.5 * n * log2pi - 0.5 * n * e_log_s - 0.5 * state.inv_sigma2 * expected_sq_resid(state, y)
    val += np.sum(-0.5 * np.log(2 * np.pi * b) - ((state.m - a) ** 2 + state.s2) / (2 * b))
    for j in range(J + 1):
        tr = precs.traces(_second_moment_centered(state, j, bb[j]))
        val += (-0.5 * n * log2pi - 0.5 * n * e_log_t[j] - 0.5 * state.p[j] @ precs.logdet
                - 0.5 * state.inv_tau[j] * (state.p[j] @ tr))
        if logdet_sigma is None:
            ld = np.linalg.slogdet(state.Sigma[j])[1]
        else:
            ld = logdet_sigma[j]
        val += 0.5 * (n * (log2pi + 1.0) + ld)
        pj = state.p[j]
        val += -np.log(precs.grid.L) - np.sum(pj[pj > 0] * np.log(pj[pj > 0]))
    val += np.sum(_ig_expected_logpdf(priors.a_tau, priors.b_tau, state.a_tau, state.b_tau))
    val += np.sum(_ig_entropy(state.a_tau, state.b_tau))
    val += _ig_expected_logpdf(priors.a_sigma, priors.b_sigma, state.a_sigma, state.b_sigma)
    val += _ig_entropy(state.a_sigma, state.b_sigma)
    val += np.sum(0.5 * np.log(2 * np.pi * np.e * state.s2))
    return float(val)


def _rel_change(new, old):
    scale = max(float(np.max(np.abs(old))), 1e-12)
    return float(np.max(np.abs(new - old))) / scale


def run_vb(y, forecasts, sites, priors=None, grid=None, tol=1e-6, max_iter=500,
           init=None, track_elbo=False):
    """Iterate sweeps until the largest relative change in (m, mu, E[1/tau],
    E[1/sigma2]) drops below ``tol``. Non-convergence is flagged, not raised."""
    if forecasts.kind != GAUSSIAN:
        raise KindMismatch("variational fit needs gaussian forecasts")
    if not tol > 0:
        raise ValueError("tol must be positive")
    y = np.asarray(y, dtype=float)
    sites = sites if isinstance(sites, SiteSet) else SiteSet(sites)
    priors = (PriorConfig() if priors is None else priors).resolve(sites, forecasts.J)
    grid = RangeGrid.log_spaced(priors.g_lo, priors.g_hi) if grid is None else grid
    precs = GridPrecisions(sites, grid)
    st = init_state(y, forecasts, priors, grid, precs) if init is None else init.copy()
    trace = []
    if track_elbo:
        trace.append(elbo(st, y, forecasts, priors, precs))
    ld = np.empty(forecasts.J + 1)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = vb_sweep(st, y, forecasts, priors, precs, logdets_out=ld)
        change = max(_rel_change(new.m, st.m) if new.m.size else 0.0,
                     _rel_change(new.mu, st.mu),
                     _rel_change(new.inv_tau, st.inv_tau),
                     _rel_change(np.atleast_1d(new.inv_sigma2), np.atleast_1d(st.inv_sigma2)))
        st = new
        if track_elbo:
            trace.append(elbo(st, y, forecasts, priors, precs, logdet_sigma=ld))
        if change < tol:
            converged = True
            break
    if not converged:
        logger.warning("variational fit did not converge in %d sweeps", max_iter)
    return VBResult(st, it, converged, trace, grid, sites, priors)


def vb_point_predict(result, new_sites, forecasts_at_new):
    """Plug-in predictive means at new sites.

    Each field is kriged from its variational mean under every grid range and
    averaged with the range probabilities.
    """
    st, grid, priors = result.state, result.grid, result.priors
    X = result.sites.coords
    bb = np.asarray(priors.beta_bar, dtype=float)
    new = np.asarray(getattr(new_sites, "coords", new_sites), dtype=float).reshape(-1, 2)
    J = st.m.shape[1]
    beta_new = np.zeros((len(new), J + 1))
    for l, g in enumerate(grid.eta):
        if not np.any(st.p[:, l] > 0):
            continue
        kern = ExpKernel(g)
        L = chol_factor(corr_matrix(X, kern), jitter=0.0)
        k = cross_corr(new, X, kern)
        alpha = linalg.cho_solve((L, True), (st.mu - bb[:, None]).T, check_finite=False)
        beta_new += st.p[:, l] * (bb + k @ alpha)
    a = forecasts_at_new.a
    return beta_new[:, 0] + np.sum(beta_new[:, 1:] * a, axis=1), beta_new


def sample_variational(result, n_draws, rng=None):
    """Independent draws from q, packaged like an MCMC run so the predictive
    machinery applies unchanged."""
    from .gibbs import PosteriorSamples

    rng = np.random.default_rng(rng)
    st, grid = result.state, result.grid
    n, J = st.m.shape
    K = int(n_draws)
    if K < 1:
        raise ValueError("n_draws must be >= 1")
    f = st.m + np.sqrt(st.s2) * rng.standard_normal((K, n, J))
    beta = np.empty((K, n, J + 1))
    for j in range(J + 1):
        L = chol_factor(0.5 * (st.Sigma[j] + st.Sigma[j].T), jitter=0.0)
        beta[:, :, j] = st.mu[j] + rng.standard_normal((K, n)) @ L.T
    tau = st.b_tau / rng.gamma(st.a_tau, size=(K, J + 1))
    g = np.column_stack([rng.choice(grid.eta, size=K, p=st.p[j]) for j in range(J + 1)])
    sigma2 = st.b_sigma / rng.gamma(st.a_sigma, size=K)
    return PosteriorSamples(f, beta, sigma2, tau, g, np.full(J + 1, np.nan), result.sites,
                            result.priors, GAUSSIAN)
