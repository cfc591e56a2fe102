"""Binary-response synthesis via Polya-gamma augmentation.

psi_i = beta_0i + sum_j beta_ji f_ji with Bernoulli latent factors f_ji and
y_i ~ Ber(expit(psi_i)). Given omega_i ~ PG(1, psi_i) the coefficient fields
are conditionally gaussian, so the gaussian sampler's field, tau and g
updates are reused with working weights omega and pseudo-response
(y - 1/2) / omega.
"""
import numpy as np
from scipy.special import expit

from . import _kernels
from .agents import BERNOULLI
from .errors import EmptyData, KindMismatch, NotPositiveDefinite, SamplerStall
from .gibbs import (
    ChainConfig,
    MHTuner,
    PriorConfig,
    SynthesisState,
    _Keeper,
    _with_iteration,
    make_backend,
    update_beta,
    update_g_mh,
    update_tau,
)
from .spatial import SiteSet

MAX_PG_ROUNDS = 10_000


def sample_pg(c, rng, size=None):
    """Draws from PG(1, c). ``c`` may be an array (one draw per entry) or a
    scalar with ``size``."""
    c = np.asarray(c, dtype=float)
    scalar = c.ndim == 0 and size is None
    if size is not None:
        c = np.broadcast_to(c, size)
    flat = np.ascontiguousarray(c, dtype=float).ravel()
    if not np.all(np.isfinite(flat)):
        raise ValueError("PG tilt must be finite")
    seed = int(rng.integers(0, 2**31 - 1))
    out, ok = _kernels.pg1_draws(flat, seed, MAX_PG_ROUNDS)
    if not ok:
        raise SamplerStall(f"no acceptance within {MAX_PG_ROUNDS} proposal rounds")
    out = out.reshape(c.shape)
    return float(out) if scalar else out


def sample_pg1(c, rng):
    return sample_pg(c, rng)


def pg_mean(c):
    """E[PG(1, c)] = tanh(c/2) / (2c), with the c -> 0 limit 1/4."""
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-6
    safe = np.where(small, 1.0, c)
    return np.where(small, 0.25 - c * c / 48.0, np.tanh(safe / 2) / (2 * safe))


def linear_predictor(state):
    return state.beta[:, 0] + np.einsum("ik,ik->i", state.f, state.beta[:, 1:])


def update_omega(state, rng):
    return sample_pg(linear_predictor(state), rng)


def update_beta_logistic(state, y, omega, priors, backend, rng):
    """Field draws with diag(omega f_j^2) + G^-1/tau precision and
    f_j * (y - 1/2 - omega * others) linear term."""
    y = np.asarray(y, dtype=float)
    return update_beta(state, y, priors, backend, rng, w=omega, z=(y - 0.5) / omega)


def factor_posterior_prob(state, y, forecasts, j):
    """P(f_ji = 1 | rest) at every site for agent j (1-based)."""
    k = j - 1
    a = forecasts.clamped()[:, k]
    psi = linear_predictor(state)
    base = psi - state.beta[:, j] * state.f[:, k]
    psi0 = base
    psi1 = base + state.beta[:, j]
    # log L = y (psi0 - psi1) + log(1 + e^psi1) - log(1 + e^psi0)
    log_L = y * (psi0 - psi1) + np.logaddexp(0.0, psi1) - np.logaddexp(0.0, psi0)
    # a / (a + (1 - a) L), computed on the log-odds scale
    return expit(np.log(a) - np.log1p(-a) - log_L)


def update_factor_bernoulli(state, y, forecasts, rng):
    y = np.asarray(y, dtype=float)
    f = state.f.copy()
    st = SynthesisState(f, state.beta, state.sigma2, state.tau, state.g)
    raw = forecasts.a
    for j in range(1, forecasts.J + 1):
        prob = factor_posterior_prob(st, y, forecasts, j)
        # hard zeros/ones in the forecast are respected exactly
        prob = np.where(raw[:, j - 1] == 0.0, 0.0, np.where(raw[:, j - 1] == 1.0, 1.0, prob))
        f[:, j - 1] = (rng.random(len(y)) < prob).astype(float)
    return f


def init_binary_state(y, forecasts, priors):
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise EmptyData("no observations")
    if forecasts.kind != BERNOULLI:
        raise KindMismatch("binary sampler needs bernoulli forecasts")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary responses must be 0 or 1")
    J = forecasts.J
    f = (forecasts.a >= 0.5).astype(float)
    beta = np.tile(np.asarray(priors.beta_bar, dtype=float), (len(y), 1))
    tau = np.full(J + 1, priors.b_tau / (priors.a_tau + 1.0))
    g = np.full(J + 1, 0.5 * (priors.g_lo + priors.g_hi))
    return SynthesisState(f, beta, np.nan, tau, g)


def run_chain_binary(y, forecasts, sites, priors=None, config=None):
    """Polya-gamma Gibbs sampler. Per iteration: factors, fields, tau, g, omega."""
    priors = PriorConfig() if priors is None else priors
    config = ChainConfig(n_burn=3000, n_keep=7000) if config is None else config
    y = np.asarray(y, dtype=float)
    sites = sites if isinstance(sites, SiteSet) else SiteSet(sites)
    if len(y) != sites.n:
        raise ValueError(f"{len(y)} responses for {sites.n} sites")
    priors = priors.resolve(sites, forecasts.J)
    rng = np.random.default_rng(config.seed)
    st = init_binary_state(y, forecasts, priors)
    p = forecasts.J + 1
    backend = make_backend(sites, p, config)
    for j in range(p):
        backend.refresh(j, st.g[j])
    step0 = config.mh_step if config.mh_step is not None else 0.1 * (priors.g_hi - priors.g_lo)
    tuner = MHTuner(step0, p)
    omega = sample_pg(linear_predictor(st), rng)

    keep = _Keeper(config.n_keep, len(y), forecasts.J, binary=True)
    acc = np.zeros(p)
    n_post = 0
    for it in range(config.n_burn + config.n_keep * config.thin):
        try:
            st.f = update_factor_bernoulli(st, y, forecasts, rng)
            st.beta = update_beta_logistic(st, y, omega, priors, backend, rng)
            st.tau = update_tau(st, priors, backend, rng)
            st.g, accepted = update_g_mh(st, priors, backend, tuner.step, rng)
            omega = update_omega(st, rng)
        except (NotPositiveDefinite, SamplerStall) as err:
            raise _with_iteration(err, it) from err
        if it < config.n_burn:
            if config.adapt:
                tuner.adapt(accepted, it)
            continue
        acc += accepted
        n_post += 1
        if (it - config.n_burn + 1) % config.thin == 0:
            keep.add(st, omega)
    return keep.result(acc / max(n_post, 1), sites, priors, config, kind=BERNOULLI)
