"""Bayesian spatial predictive synthesis.

Combines several spatial predictors through a latent-factor model with
spatially varying coefficient fields. Samplers: full and nearest-neighbor
GP Gibbs (gaussian), Polya-gamma Gibbs (binary) and mean-field VB.
"""
from .agents import (AgentForecastSet, OlsAgent, bic, bma_weights, fit_ols,
                     synthesize_bma, synthesize_sa)
from .errors import *  # noqa: F401,F403
from .gibbs import ChainConfig, PosteriorSamples, PriorConfig, SynthesisState, run_chain
from .logistic import run_chain_binary, sample_pg
from .predict import predictive_draws, summarize, weight_ratio_map
from .spatial import (ExpKernel, SiteSet, build_neighbor_index, corr_matrix,
                      gp_conditional, nngp_coefficients, pairwise_distances, sample_gp)
from .vb import RangeGrid, run_vb, vb_point_predict

__version__ = "0.1.0"
