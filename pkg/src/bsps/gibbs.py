"""Gibbs sampler for the gaussian-response synthesis model.

The coefficient fields beta_0..beta_J (column 0 is the intercept, whose
"factor" is identically one) each carry a GP prior with mean beta_bar_j,
scale tau_j and exponential range g_j. Two interchangeable backends provide
the prior: a dense GP and a nearest-neighbor GP.
"""
from dataclasses import dataclass, field, replace
import logging

import numpy as np
from scipy import linalg

from . import _kernels
from .agents import GAUSSIAN, AgentForecastSet
from .errors import EmptyData, KindMismatch, NotPositiveDefinite
from .spatial import (
    ExpKernel,
    SiteSet,
    build_neighbor_index,
    chol_factor,
    chol_logdet,
    corr_matrix,
    nngp_coefficients,
    nngp_quadform,
    pairwise_distances,
)

logger = logging.getLogger(__name__)

TARGET_ACCEPT = 0.35


@dataclass(frozen=True)
class PriorConfig:
    """Priors: IG(a_sigma, b_sigma) on sigma2, IG(a_tau, b_tau) on each tau_j,
    U(g_lo, g_hi) on each g_j and fixed GP means ``beta_bar``.

    Unset range bounds and ``beta_bar`` are filled by :meth:`resolve`.
    """

    a_sigma: float = 0.1
    b_sigma: float = 0.1
    a_tau: float = 0.1
    b_tau: float = 0.1
    g_lo: float = None
    g_hi: float = None
    beta_bar: tuple = None

    def __post_init__(self):
        for name in ("a_sigma", "b_sigma", "a_tau", "b_tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.g_lo is not None and self.g_hi is not None:
            if not 0 < self.g_lo < self.g_hi:
                raise ValueError("need 0 < g_lo < g_hi")

    def resolve(self, sites, J):
        """Fill defaults: g bounds from the maximum pairwise distance,
        beta_bar = (0, 1/J, ..., 1/J)."""
        g_lo, g_hi = self.g_lo, self.g_hi
        if g_lo is None or g_hi is None:
            dmax = float(pairwise_distances(sites).max()) if len(sites) > 1 else 1.0
            dmax = dmax if dmax > 0 else 1.0
            g_lo = 0.01 * dmax if g_lo is None else g_lo
            g_hi = dmax if g_hi is None else g_hi
        bb = self.beta_bar
        if bb is None:
            bb = (0.0,) + (1.0 / J,) * J if J > 0 else (0.0,)
        bb = tuple(float(v) for v in bb)
        if len(bb) != J + 1:
            raise ValueError(f"beta_bar needs {J + 1} entries, got {len(bb)}")
        return replace(self, g_lo=float(g_lo), g_hi=float(g_hi), beta_bar=bb)


@dataclass
class SynthesisState:
    f: np.ndarray        # (n, J)
    beta: np.ndarray     # (n, J + 1)
    sigma2: float
    tau: np.ndarray      # (J + 1,)
    g: np.ndarray        # (J + 1,)

    @property
    def design(self):
        """(n, J + 1) factor matrix with the intercept column of ones."""
        return np.column_stack([np.ones(len(self.beta)), self.f])

    def copy(self):
        return SynthesisState(self.f.copy(), self.beta.copy(), float(self.sigma2),
                              self.tau.copy(), self.g.copy())


@dataclass(frozen=True)
class ChainConfig:
    n_burn: int = 1000
    n_keep: int = 1000
    thin: int = 1
    backend: str = "full"
    m: int = 10
    mh_step: float = None
    adapt: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_keep < 1 or self.thin < 1 or self.n_burn < 0:
            raise ValueError("need n_keep >= 1, thin >= 1, n_burn >= 0")
        if self.backend not in ("full", "nngp"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "nngp" and self.m < 1:
            raise ValueError("nngp backend needs m >= 1")


@dataclass
class PosteriorSamples:
    """Retained draws, stacked along the first axis."""

    f: np.ndarray          # (K, n, J)
    beta: np.ndarray       # (K, n, J + 1)
    sigma2: np.ndarray     # (K,) ; nan for binary chains
    tau: np.ndarray        # (K, J + 1)
    g: np.ndarray          # (K, J + 1)
    accept_rate: np.ndarray
    sites: SiteSet
    priors: PriorConfig
    kind: str = GAUSSIAN
    omega: np.ndarray = None
    config: ChainConfig = field(default=None)

    @property
    def n_draws(self):
        return self.beta.shape[0]

    @property
    def J(self):
        return self.beta.shape[2] - 1

    def beta_mean(self):
        return self.beta.mean(axis=0)


# ---------------------------------------------------------------------------
# backends


class FullGPBackend:
    """Dense GP prior with per-field cached factorizations of G(g_j)."""

    name = "full"

    def __init__(self, sites, n_fields):
        self.sites = sites
        self.dist = pairwise_distances(sites)
        self._cache = [None] * n_fields

    def factor(self, g):
        C = np.exp(-self.dist / g)
        np.fill_diagonal(C, 1.0)
        L = chol_factor(C, jitter=0.0)
        Linv = linalg.solve_triangular(L, np.eye(len(C)), lower=True, check_finite=False)
        return {"g": g, "L": L, "prec": Linv.T @ Linv, "logdet": chol_logdet(L)}

    def refresh(self, j, g):
        art = self._cache[j]
        if art is None or art["g"] != g:
            self._cache[j] = self.factor(g)
        return self._cache[j]

    def set(self, j, art):
        self._cache[j] = art

    def get(self, j):
        return self._cache[j]

    @staticmethod
    def quadform_with(art, resid):
        return float(resid @ art["prec"] @ resid)

    @staticmethod
    def logdet_with(art):
        return art["logdet"]

    def draw_beta(self, beta, fmat, w, z, beta_bar, tau, rng):
        """Blocked draws of each field given the others, j = 0..J."""
        n, p = beta.shape
        beta = beta.copy()
        for j in range(p):
            beta[:, j] = draw_field_dense(beta, fmat, w, z, j, beta_bar[j], tau[j],
                                          self._cache[j]["prec"], rng)
        return beta


def draw_field_dense(beta, fmat, w, z, j, beta_bar_j, tau_j, prec, rng):
    """One draw of field j from N(A b, A), A = (diag(w f_j^2) + G^-1 / tau)^-1."""
    partial = z - (np.einsum("ik,ik->i", fmat, beta) - fmat[:, j] * beta[:, j])
    fj = fmat[:, j]
    P = prec / tau_j
    ones_term = P.sum(axis=1) * beta_bar_j
    P = P.copy()
    P[np.diag_indices_from(P)] += w * fj * fj
    b = w * fj * partial + ones_term
    L = chol_factor(P, jitter=0.0)
    mean = linalg.cho_solve((L, True), b, check_finite=False)
    eps = rng.standard_normal(len(b))
    return mean + linalg.solve_triangular(L.T, eps, lower=False, check_finite=False)


class NngpBackend:
    """Nearest-neighbor GP prior; artifacts are per-field (B, F) tables."""

    name = "nngp"

    def __init__(self, sites, n_fields, m):
        self.sites = sites
        self.coords = np.ascontiguousarray(sites.coords)
        self.index = build_neighbor_index(sites, m)
        self._cache = [None] * n_fields

    def factor(self, g):
        co = nngp_coefficients(self.index, self.coords, ExpKernel(g))
        return {"g": g, "coeffs": co, "logdet": float(np.sum(np.log(co.F)))}

    def refresh(self, j, g):
        art = self._cache[j]
        if art is None or art["g"] != g:
            self._cache[j] = self.factor(g)
        return self._cache[j]

    def set(self, j, art):
        self._cache[j] = art

    def get(self, j):
        return self._cache[j]

    def quadform_with(self, art, resid):
        return nngp_quadform(resid, self.index, art["coeffs"])

    @staticmethod
    def logdet_with(art):
        return art["logdet"]

    def draw_beta(self, beta, fmat, w, z, beta_bar, tau, rng):
        n, p = beta.shape
        idx = self.index
        B = np.stack([self._cache[j]["coeffs"].B for j in range(p)])
        F = np.stack([self._cache[j]["coeffs"].F for j in range(p)])
        out = np.ascontiguousarray(beta, dtype=float).copy()
        normals = rng.standard_normal((n, p))
        ok = _kernels.nngp_site_sweep(
            idx.ordering, out, np.ascontiguousarray(fmat), np.ascontiguousarray(w, dtype=float),
            np.ascontiguousarray(z, dtype=float), np.asarray(beta_bar, dtype=float),
            np.asarray(tau, dtype=float), idx.neighbors, idx.counts, B, F,
            idx.child_ptr, idx.child_site, idx.child_pos, normals)
        if not ok:
            raise NotPositiveDefinite("site-level coefficient precision not positive definite")
        return out


def make_backend(sites, n_fields, config):
    if config.backend == "full":
        return FullGPBackend(sites, n_fields)
    return NngpBackend(sites, n_fields, config.m)


# ---------------------------------------------------------------------------
# updates


def init_state(y, forecasts, priors, rng=None):
    """Deterministic starting point: factors at the agent means, fields at
    their prior means, sigma2 at the sample variance, tau at its prior mode
    and g mid-range. ``priors`` must be resolved."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise EmptyData("no observations")
    if forecasts.kind != GAUSSIAN:
        raise KindMismatch("gaussian sampler needs gaussian forecasts")
    _check_rect(y, forecasts)
    J = forecasts.J
    beta = np.tile(np.asarray(priors.beta_bar, dtype=float), (len(y), 1))
    sigma2 = max(float(np.var(y, ddof=1)) if len(y) > 1 else 0.0, 1e-6)
    tau = np.full(J + 1, priors.b_tau / (priors.a_tau + 1.0))
    g = np.full(J + 1, 0.5 * (priors.g_lo + priors.g_hi))
    return SynthesisState(forecasts.a.copy(), beta, sigma2, tau, g)


def _check_rect(y, forecasts):
    if forecasts.n != len(y):
        raise ValueError(f"{len(y)} responses but forecasts for {forecasts.n} sites")


def factor_conditional(state, y, forecasts, j):
    """Mean and variance of the full conditional of f_j (column j-1) at every site."""
    k = j - 1
    b = forecasts.b[:, k]
    bj = state.beta[:, j]
    fitted = state.beta[:, 0] + np.einsum("ik,ik->i", state.f, state.beta[:, 1:])
    partial = y - fitted + bj * state.f[:, k]
    A = 1.0 / (bj * bj / state.sigma2 + 1.0 / b)
    B = bj / state.sigma2 * partial + forecasts.a[:, k] / b
    return A * B, A


def update_factors(state, y, forecasts, rng):
    """Sweep j = 1..J; each agent's factors use the freshest values of the others."""
    st = state.copy()
    for j in range(1, forecasts.J + 1):
        mean, var = factor_conditional(st, y, forecasts, j)
        st.f[:, j - 1] = mean + np.sqrt(var) * rng.standard_normal(len(y))
    return st.f


def update_beta(state, y, priors, backend, rng, w=None, z=None):
    """Coefficient draw with working weights ``w`` and pseudo-response ``z``.

    Gaussian responses use w = 1/sigma2 and z = y.
    """
    if w is None:
        w = np.full(len(y), 1.0 / state.sigma2)
    if z is None:
        z = np.asarray(y, dtype=float)
    return backend.draw_beta(state.beta, state.design, w, z,
                             np.asarray(priors.beta_bar), state.tau, rng)


def update_beta_full(state, y, priors, backend, rng):
    return update_beta(state, y, priors, backend, rng)


def update_beta_nngp(state, y, priors, backend, rng):
    return update_beta(state, y, priors, backend, rng)


def tau_posterior(state, priors, backend, j):
    """Shape and rate of the inverse-gamma full conditional of tau_j."""
    resid = state.beta[:, j] - priors.beta_bar[j]
    qf = backend.quadform_with(backend.get(j), resid)
    return priors.a_tau + 0.5 * len(resid), priors.b_tau + 0.5 * qf


def update_tau(state, priors, backend, rng):
    tau = np.empty_like(state.tau)
    for j in range(len(tau)):
        shape, rate = tau_posterior(state, priors, backend, j)
        tau[j] = rate / rng.gamma(shape)
    return tau


def g_log_target(backend, art, resid, tau):
    """log of |G(g)|^-1/2 exp(-qf / (2 tau)) for the given factorization."""
    return -0.5 * backend.logdet_with(art) - backend.quadform_with(art, resid) / (2.0 * tau)


def reflect(x, lo, hi):
    """Fold ``x`` back into [lo, hi] by repeated reflection at the bounds."""
    width = hi - lo
    r = np.mod(x - lo, 2.0 * width)
    return lo + (r if r <= width else 2.0 * width - r)


def update_g_mh(state, priors, backend, step, rng):
    """Random-walk Metropolis on each g_j with reflection at the bounds.

    Returns (g, accepted). Accepted proposals replace the cached
    factorization; a proposal that fails to factor counts as a rejection.
    """
    p = len(state.g)
    g = state.g.copy()
    accepted = np.zeros(p, dtype=bool)
    step = np.broadcast_to(np.asarray(step, dtype=float), (p,))
    for j in range(p):
        eps = rng.standard_normal()
        u = rng.random()
        prop = reflect(g[j] + step[j] * eps, priors.g_lo, priors.g_hi)
        if prop == g[j]:
            accepted[j] = True
            continue
        resid = state.beta[:, j] - priors.beta_bar[j]
        cur = backend.get(j)
        try:
            new = backend.factor(prop)
        except NotPositiveDefinite:
            continue
        log_ratio = (g_log_target(backend, new, resid, state.tau[j])
                     - g_log_target(backend, cur, resid, state.tau[j]))
        if np.log(u) < log_ratio:
            g[j] = prop
            backend.set(j, new)
            accepted[j] = True
    return g, accepted


def residuals(state, y):
    return y - state.beta[:, 0] - np.einsum("ik,ik->i", state.f, state.beta[:, 1:])


def sigma2_posterior(state, y, priors):
    """Shape and rate of the inverse-gamma full conditional of sigma2."""
    r = residuals(state, y)
    return priors.a_sigma + 0.5 * len(y), priors.b_sigma + 0.5 * float(r @ r)


def update_sigma2(state, y, priors, rng):
    shape, rate = sigma2_posterior(state, y, priors)
    return rate / rng.gamma(shape)


# ---------------------------------------------------------------------------
# driver


class MHTuner:
    """Per-field random-walk scale with Robbins-Monro adaptation on the log
    scale during burn-in; frozen afterwards."""

    def __init__(self, step, p, target=TARGET_ACCEPT):
        self.log_step = np.full(p, np.log(step))
        self.target = target

    @property
    def step(self):
        return np.exp(self.log_step)

    def adapt(self, accepted, it):
        self.log_step += (accepted.astype(float) - self.target) / (it + 1.0) ** 0.6


def _with_iteration(err, it):
    msg = f"iteration {it}: {err}"
    try:
        new = type(err)(msg)
    except Exception:  # pragma: no cover
        return err
    return new


def run_chain(y, forecasts, sites, priors=None, config=None, state=None,
              callback=None):
    """Run the sampler and return retained draws.

    Each iteration updates factors, coefficient fields, tau, g and sigma2 in
    that order. ``priors`` are resolved against ``sites`` if needed.
    """
    priors = PriorConfig() if priors is None else priors
    config = ChainConfig() if config is None else config
    y = np.asarray(y, dtype=float)
    sites = sites if isinstance(sites, SiteSet) else SiteSet(sites)
    if len(y) != sites.n:
        raise ValueError(f"{len(y)} responses for {sites.n} sites")
    priors = priors.resolve(sites, forecasts.J)
    rng = np.random.default_rng(config.seed)
    st = init_state(y, forecasts, priors, rng) if state is None else state.copy()
    p = forecasts.J + 1
    backend = make_backend(sites, p, config)
    for j in range(p):
        backend.refresh(j, st.g[j])
    step0 = config.mh_step if config.mh_step is not None else 0.1 * (priors.g_hi - priors.g_lo)
    tuner = MHTuner(step0, p)

    total = config.n_burn + config.n_keep * config.thin
    keep = _Keeper(config.n_keep, len(y), forecasts.J)
    acc = np.zeros(p)
    n_post = 0
    for it in range(total):
        try:
            st.f = update_factors(st, y, forecasts, rng)
            st.beta = update_beta(st, y, priors, backend, rng)
            st.tau = update_tau(st, priors, backend, rng)
            st.g, accepted = update_g_mh(st, priors, backend, tuner.step, rng)
            st.sigma2 = update_sigma2(st, y, priors, rng)
        except (NotPositiveDefinite, FloatingPointError) as err:
            raise _with_iteration(err, it) from err
        if it < config.n_burn:
            if config.adapt:
                tuner.adapt(accepted, it)
            continue
        acc += accepted
        n_post += 1
        if (it - config.n_burn + 1) % config.thin == 0:
            keep.add(st)
        if callback is not None:
            callback(it, st)
    return keep.result(acc / max(n_post, 1), sites, priors, config)


class _Keeper:
    def __init__(self, K, n, J, binary=False):
        self.f = np.empty((K, n, J))
        self.beta = np.empty((K, n, J + 1))
        self.sigma2 = np.full(K, np.nan)
        self.tau = np.empty((K, J + 1))
        self.g = np.empty((K, J + 1))
        self.omega = np.empty((K, n)) if binary else None
        self.k = 0

    def add(self, st, omega=None):
        k = self.k
        self.f[k] = st.f
        self.beta[k] = st.beta
        self.sigma2[k] = st.sigma2
        self.tau[k] = st.tau
        self.g[k] = st.g
        if omega is not None:
            self.omega[k] = omega
        self.k += 1

    def result(self, accept_rate, sites, priors, config, kind=GAUSSIAN):
        return PosteriorSamples(self.f, self.beta, self.sigma2, self.tau, self.g,
                                accept_rate, sites, priors, kind, self.omega, config)
