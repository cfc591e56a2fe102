"""
Spatially varying synthesis of two regional agents
===================================================

One replication of the left/right toy design: two quadratic regressions,
each fitted on one half of the square, are combined with BMA, a simple
average and the spatial synthesis model. Run with ``python3 demos/toy_study.py``.
"""
import numpy as np

from bsps import (ChainConfig, PriorConfig, bma_weights, predictive_draws, run_chain,
                  summarize, synthesize_bma, synthesize_sa, weight_ratio_map)
from bsps.experiments import (agent_forecasts, agent_full_sample_bics, coverage_and_length, mse,
                              simulate_toy, toy_agents)

seed = 3
data = simulate_toy(seed)
agents = toy_agents(data)
F_train = agent_forecasts(agents, data.X_train, data.train_sites.coords)
F_test = agent_forecasts(agents, data.X_test, data.test_sites.coords)
y = data.y_test

# baselines
for k, ag in enumerate(agents):
    print(f"{ag.name:>5}  test MSE {mse(F_test.a[:, k], y):6.3f}")
w = bma_weights(agent_full_sample_bics(agents, data))
print(f"  BMA  test MSE {mse(synthesize_bma(F_test, w)[0], y):6.3f}   weights {np.round(w, 3)}")
print(f"   SA  test MSE {mse(synthesize_sa(F_test)[0], y):6.3f}")

# synthesis with the nearest-neighbour backend
cfg = ChainConfig(n_burn=1000, n_keep=1000, backend="nngp", m=10, seed=seed)
samples = run_chain(data.y_train, F_train, data.train_sites, PriorConfig(), cfg)
print("MH acceptance for the ranges:", np.round(samples.accept_rate, 3))

summ = summarize(predictive_draws(samples, data.test_sites, F_test, rng=seed + 1))
cp, al = coverage_and_length(summ, y)
print(f" BSPS  test MSE {mse(summ.mean, y):6.3f}   95% coverage {cp:.1f}%  mean length {al:.2f}")

# where does the synthesis trust QR1? ratio |b1| / (|b1| + |b2|) by half
ratio = weight_ratio_map(samples, 1, 2)
left = data.region_train == 1
print(f"QR1 share of the agent weight: left half {ratio[left].mean():.2f}, "
      f"right half {ratio[~left].mean():.2f}")
