"""
Synthesizing probability forecasts for a binary outcome
=======================================================

Two agents issue success probabilities; one is informative in the north of
the square, the other in the south. The Polya-gamma sampler learns where to
trust each and we score the synthesized probabilities by AUC.
"""
import numpy as np
from scipy.special import expit

from bsps import AgentForecastSet, ChainConfig, SiteSet, predictive_draws
from bsps.experiments import roc_auc
from bsps.logistic import run_chain_binary

rng = np.random.default_rng(5)
n_train, n_test = 200, 100
coords = rng.uniform(0, 1, (n_train + n_test, 2))
truth = expit(3 * np.sin(4 * coords[:, 0]) - 1.5)
noise = expit(rng.normal(0, 1.5, len(coords)))
north = coords[:, 1] > 0.5
# agent 1 is right in the north, agent 2 in the south
a1 = np.where(north, truth, noise)
a2 = np.where(north, noise, truth)
y = (rng.random(len(coords)) < truth).astype(float)

tr, te = slice(0, n_train), slice(n_train, None)
F_train = AgentForecastSet(np.column_stack([a1[tr], a2[tr]]), kind="bernoulli")
F_test = AgentForecastSet(np.column_stack([a1[te], a2[te]]), kind="bernoulli")
sites = SiteSet(coords[tr])

samples = run_chain_binary(y[tr], F_train, sites,
                           config=ChainConfig(n_burn=1000, n_keep=2000, seed=0))
prob = predictive_draws(samples, coords[te], F_test, rng=1).y.mean(axis=0)

for name, p in [("agent 1", a1[te]), ("agent 2", a2[te]), ("average", (a1[te] + a2[te]) / 2),
                ("synthesis", prob)]:
    print(f"{name:>10}  AUC {roc_auc(p, y[te]):.3f}")

b = samples.beta_mean()
n_tr = north[tr]
print(f"mean agent-1 coefficient: north {b[n_tr, 1].mean():.2f}, south {b[~n_tr, 1].mean():.2f}")
print(f"mean agent-2 coefficient: north {b[n_tr, 2].mean():.2f}, south {b[~n_tr, 2].mean():.2f}")
