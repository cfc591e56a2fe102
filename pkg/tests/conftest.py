import functools

import numpy as np
import pytest
from scipy import stats

from bsps.agents import AgentForecastSet
from bsps.spatial import ExpKernel, SiteSet, sample_gp


def dense_mvn_logpdf(x, mean, cov):
    return stats.multivariate_normal(mean=mean, cov=cov).logpdf(x)


def batch_means_se(x, n_batches=20):
    """Monte Carlo standard error of the mean of an autocorrelated series."""
    x = np.asarray(x, dtype=float)
    k = len(x) // n_batches
    means = x[: k * n_batches].reshape(n_batches, k).mean(axis=1)
    return means.std(ddof=1) / np.sqrt(n_batches)


def small_problem(n=10, J=1, seed=0, b=0.05, noise=0.3):
    """Gaussian synthesis fixture on the unit square."""
    rng = np.random.default_rng(seed)
    sites = SiteSet(rng.uniform(0, 1, (n, 2)))
    a = rng.normal(0, 1, (n, J))
    beta = [sample_gp(sites, 0.3, ExpKernel(0.5), rng) + (1.0 / J) for _ in range(J)]
    y = sum(beta[j] * a[:, j] for j in range(J)) + rng.normal(0, noise, n)
    return sites, y, AgentForecastSet(a, np.full((n, J), b))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@functools.lru_cache(maxsize=None)
def vb_mcmc_case():
    """n=30, J=2 fixture with a 20k-draw MCMC reference, a converged VB fit
    and 20 new sites; shared by the VB tests and the acceptance suite."""
    from bsps.gibbs import ChainConfig, run_chain
    from bsps.predict import predictive_draws
    from bsps.vb import run_vb

    sites, y, F = small_problem(n=30, J=2, seed=0)
    mcmc = run_chain(y, F, sites, config=ChainConfig(n_burn=2000, n_keep=20_000, seed=1))
    vb = run_vb(y, F, sites, tol=1e-8, max_iter=2000, track_elbo=True)
    r = np.random.default_rng(99)
    new = r.uniform(0, 1, (20, 2))
    F_new = AgentForecastSet(r.normal(size=(20, 2)), np.full((20, 2), 0.05))
    pred = predictive_draws(mcmc, new, F_new, rng=1)
    return dict(sites=sites, y=y, F=F, mcmc=mcmc, vb=vb, new=new, F_new=F_new,
                mcmc_pred_mean=pred.y.mean(axis=0))


@functools.lru_cache(maxsize=None)
def toy_report(n_reps=20):
    """The left/right toy experiment with every method, shared across files."""
    from bsps.experiments import ExperimentSpec, run_replications

    return run_replications(ExperimentSpec("toy"), n_reps, base_seed=0, parallelism=_workers())


def _workers():
    import os

    return max(1, min(8, os.cpu_count() or 1))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
