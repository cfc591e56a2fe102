"""
Variational fit against the Gibbs sampler
=========================================

Fits the same small synthesis problem by coordinate-ascent VB and by MCMC,
then compares the coefficient fields and the point predictions.
"""
import time

import numpy as np

from bsps import AgentForecastSet, ChainConfig, SiteSet, predictive_draws, run_chain
from bsps.spatial import ExpKernel, sample_gp
from bsps.vb import run_vb, vb_point_predict

rng = np.random.default_rng(0)
n, J = 60, 2
sites = SiteSet(rng.uniform(0, 1, (n, 2)))
a = rng.normal(size=(n, J))
fields = [sample_gp(sites, 0.3, ExpKernel(0.5), rng) + 0.5 for _ in range(J)]
y = sum(fields[j] * a[:, j] for j in range(J)) + rng.normal(0, 0.3, n)
F = AgentForecastSet(a, np.full((n, J), 0.05))

t = time.perf_counter()
vb = run_vb(y, F, sites, tol=1e-6, track_elbo=True)
t_vb = time.perf_counter() - t
print(f"VB: {vb.n_iter} sweeps in {t_vb:.2f}s, converged={vb.converged}")
print("ELBO never decreases:", bool(np.all(np.diff(vb.elbo) >= -1e-8)))

t = time.perf_counter()
mcmc = run_chain(y, F, sites, config=ChainConfig(n_burn=1000, n_keep=5000, seed=1))
print(f"MCMC: {mcmc.n_draws} draws in {time.perf_counter() - t:.2f}s")

rmse = np.sqrt(np.mean((vb.state.mu.T - mcmc.beta_mean()) ** 2, axis=0))
print("RMSE between VB and MCMC field means (intercept, agent 1, agent 2):", np.round(rmse, 3))

new = rng.uniform(0, 1, (25, 2))
F_new = AgentForecastSet(rng.normal(size=(25, J)), np.full((25, J), 0.05))
vb_mean, _ = vb_point_predict(vb, new, F_new)
mc_mean = predictive_draws(mcmc, new, F_new, rng=2).y.mean(axis=0)
print(f"RMSE between VB and MCMC predictive means: {np.sqrt(np.mean((vb_mean - mc_mean) ** 2)):.3f}")
