"""Simulation designs, evaluation metrics and the replication runner.

Two designs are provided. The toy design splits the square [-1, 1]^2 into
a left and a right half with different mean structures and uses two
quadratic regression agents, each fitted on one half. The scenario designs
live on [0, 1]^2 with p covariates and three built-in OLS agents.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import logging

import numpy as np
from scipy.stats import norm, rankdata
from threadpoolctl import threadpool_limits

from .agents import (AgentForecastSet, OlsAgent, bic, bma_weights, linear_design,
                     quadratic_design, synthesize_bma, synthesize_sa)
from .errors import BSPSError, LengthMismatch, SingleClass, UnknownExperiment
from .gibbs import ChainConfig, PriorConfig, run_chain
from .predict import predictive_draws, summarize
from .spatial import ExpKernel, SiteSet, sample_gp
from .vb import run_vb, vb_point_predict

logger = logging.getLogger(__name__)

EXPERIMENTS = ("toy", "scenario1", "scenario2")
DECILES = tuple(np.round(np.arange(0.1, 1.0, 0.1), 1))


# ---------------------------------------------------------------------------
# data generating processes


@dataclass(frozen=True)
class Dataset:
    train_sites: SiteSet
    test_sites: SiteSet
    X_train: np.ndarray
    X_test: np.ndarray
    y_train: np.ndarray
    y_test: np.ndarray
    w_train: np.ndarray
    w_test: np.ndarray
    name: str = ""

    @property
    def region_train(self):
        """1 for the left half (s1 <= 0), 2 otherwise."""
        return np.where(self.train_sites.coords[:, 0] <= 0, 1, 2)

    @property
    def region_test(self):
        return np.where(self.test_sites.coords[:, 0] <= 0, 1, 2)


ToyDataset = Dataset
ScenarioDataset = Dataset


def _covariate_pair(sites, r, rng):
    z1 = sample_gp(sites, 1.0, ExpKernel(0.5), rng)
    z2 = sample_gp(sites, 1.0, ExpKernel(0.5), rng)
    return z1, r * z1 + np.sqrt(1.0 - r * r) * z2


def _split(coords, X, y, w, n_train, name):
    tr, te = slice(0, n_train), slice(n_train, None)
    return Dataset(SiteSet(coords[tr]), SiteSet(coords[te]), X[tr], X[te], y[tr], y[te],
                   w[tr], w[te], name)


def toy_mean(coords, x1, x2):
    left = coords[:, 0] <= 0
    return np.where(left, x1 - 0.5 * x2 ** 2, x1 ** 2 + x2 ** 2)


def simulate_toy(seed, r=0.2, n_train=300, n_test=200):
    """Left/right regime design on [-1, 1]^2.

    All latent surfaces are drawn jointly over train and test sites, so the
    test sites share them.
    """
    if not -1.0 <= r <= 1.0:
        raise ValueError("r must lie in [-1, 1]")
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    coords = rng.uniform(-1.0, 1.0, (n, 2))
    sites = SiteSet(coords)
    x1, x2 = _covariate_pair(sites, r, rng)
    w = sample_gp(sites, 0.3, ExpKernel(0.3), rng)
    y = w + toy_mean(sites.coords, x1, x2) + rng.standard_normal(n)
    return _split(sites.coords, np.column_stack([x1, x2]), y, w, n_train, "toy")


def scenario_mean(which, coords, X, w):
    if which == 1:
        sq = np.sum(coords ** 2, axis=1)
        return w + X[:, 2] ** 2 * np.exp(-0.3 * sq) + coords[:, 1] * np.sin(2 * X[:, 1])
    if which == 2:
        return (2 * w + 0.5 * np.sin(np.pi * X[:, 0] * X[:, 1]) + (X[:, 2] - 0.5) ** 2
                + 0.5 * X[:, 3] + 0.25 * X[:, 4])
    raise UnknownExperiment(f"scenario {which!r} (expected 1 or 2)")


def simulate_scenario(which, p=5, seed=0, n_train=300, n_test=100, r=0.2, noise_sd=0.7):
    if which not in (1, 2):
        raise UnknownExperiment(f"scenario {which!r} (expected 1 or 2)")
    if p < 5:
        raise ValueError("scenarios need p >= 5")
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    coords = rng.uniform(0.0, 1.0, (n, 2))
    sites = SiteSet(coords)
    x1, x2 = _covariate_pair(sites, r, rng)
    rest = rng.standard_normal((n, p - 2))
    X = np.column_stack([x1, x2, rest])
    w = sample_gp(sites, 0.3, ExpKernel(0.3), rng)
    y = scenario_mean(which, sites.coords, X, w) + noise_sd * rng.standard_normal(n)
    return _split(sites.coords, X, y, w, n_train, f"scenario{which}")


# ---------------------------------------------------------------------------
# metrics


def _pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) != len(b):
        raise LengthMismatch(f"lengths {len(a)} and {len(b)} differ")
    if len(a) == 0:
        raise LengthMismatch("empty input")
    return a, b


def mse(pred, truth):
    pred, truth = _pair(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def coverage_and_length(summary, truth):
    """(CP in percent, average interval length)."""
    lo, hi = _pair(summary.lower, summary.upper)
    lo, truth = _pair(lo, truth)
    inside = (truth >= lo) & (truth <= hi)
    return 100.0 * float(inside.mean()), float(np.mean(hi - lo))


def roc_auc(probs, labels):
    """Area under the ROC curve via the Mann-Whitney statistic, ties averaged."""
    probs, labels = _pair(probs, labels)
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("labels contain a single class")
    ranks = rankdata(probs)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


@dataclass(frozen=True)
class IntervalSummary:
    """Interval summary for methods with closed-form gaussian predictives."""
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def gaussian_interval(mean, var, alpha=0.05):
    z = norm.ppf(1 - alpha / 2)
    sd = np.sqrt(var)
    return IntervalSummary(mean, mean - z * sd, mean + z * sd)


# ---------------------------------------------------------------------------
# agents per design


def toy_agents(data):
    """QR1 fitted on the left half, QR2 on the right; both predict everywhere."""
    agents, names = [], ["QR1", "QR2"]
    for region in (1, 2):
        idx = data.region_train == region
        agents.append(OlsAgent(quadratic_design, names[region - 1]).fit(data.X_train[idx],
                                                                        data.y_train[idx]))
    return agents


def _trend_design(n_cov):
    def design(Z):
        X = Z[:, :n_cov]
        s = Z[:, n_cov:]
        return np.column_stack([np.ones(len(Z)), X, s, s ** 2, s[:, :1] * s[:, 1:]])
    return design


def scenario_agents(data):
    """Linear, additive quadratic and coordinate-trend OLS agents on all
    training rows."""
    p = data.X_train.shape[1]
    Ztr = np.column_stack([data.X_train, data.train_sites.coords])
    specs = [(linear_design, "OLS-LIN", False), (quadratic_design, "OLS-QUAD", False),
             (_trend_design(p), "OLS-TREND", True)]
    agents = []
    for design, name, spatial in specs:
        Z = Ztr if spatial else data.X_train
        ag = OlsAgent(design, name).fit(Z, data.y_train)
        ag.uses_coords = spatial
        agents.append(ag)
    return agents


def agent_forecasts(agents, X, coords):
    means, variances = [], []
    for ag in agents:
        Z = np.column_stack([X, coords]) if getattr(ag, "uses_coords", False) else X
        mu, v = ag.forecast(Z)
        means.append(mu)
        variances.append(v)
    return AgentForecastSet(np.column_stack(means), np.column_stack(variances))


def agent_full_sample_bics(agents, data):
    """BIC of each agent's fitted coefficients scored on the full training
    sample, so that region-fitted models are compared on common data."""
    n = len(data.y_train)
    out = []
    for ag in agents:
        Z = data.X_train
        if getattr(ag, "uses_coords", False):
            Z = np.column_stack([Z, data.train_sites.coords])
        out.append(bic(ag.fit_, n=n, rss=ag.rss_on(Z, data.y_train)))
    return np.array(out)


# ---------------------------------------------------------------------------
# replication runner


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "toy"
    p: int = 5
    n_burn: int = 1000
    n_keep: int = 1000
    backend: str = "nngp"
    m: int = 10
    alpha: float = 0.05
    methods: tuple = ("BSPS", "BSPS-VB", "BMA", "SA", "agents")
    vb_tol: float = 1e-4
    vb_max_iter: int = 300

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise UnknownExperiment(f"{self.name!r}; expected one of {', '.join(EXPERIMENTS)}")

    def simulate(self, seed):
        if self.name == "toy":
            return simulate_toy(seed)
        return simulate_scenario(int(self.name[-1]), self.p, seed)

    def agents(self, data):
        return toy_agents(data) if self.name == "toy" else scenario_agents(data)


def run_one(spec, seed):
    """Metrics for every method on one fresh dataset: {method: {metric: value}}."""
    data = spec.simulate(seed)
    agents = spec.agents(data)
    F_tr = agent_forecasts(agents, data.X_train, data.train_sites.coords)
    F_te = agent_forecasts(agents, data.X_test, data.test_sites.coords)
    y_te = data.y_test
    out = {}
    want = set(spec.methods)

    if "agents" in want:
        for k, ag in enumerate(agents):
            iv = gaussian_interval(F_te.a[:, k], F_te.b[:, k], spec.alpha)
            cp, al = coverage_and_length(iv, y_te)
            out[ag.name] = {"mse": mse(F_te.a[:, k], y_te), "cp": cp, "al": al}
    if "BMA" in want:
        w = bma_weights(agent_full_sample_bics(agents, data))
        mean, _ = synthesize_bma(F_te, w)
        out["BMA"] = {"mse": mse(mean, y_te), "w1": float(w[0])}
    if "SA" in want:
        mean, _ = synthesize_sa(F_te)
        out["SA"] = {"mse": mse(mean, y_te)}
    if "BSPS" in want:
        cfg = ChainConfig(n_burn=spec.n_burn, n_keep=spec.n_keep, backend=spec.backend,
                          m=spec.m, seed=seed)
        samples = run_chain(data.y_train, F_tr, data.train_sites, PriorConfig(), cfg)
        draws = predictive_draws(samples, data.test_sites, F_te, np.random.default_rng(seed + 1))
        summ = summarize(draws, spec.alpha)
        cp, al = coverage_and_length(summ, y_te)
        out["BSPS"] = {"mse": mse(summ.mean, y_te), "cp": cp, "al": al}
    if "BSPS-VB" in want:
        res = run_vb(data.y_train, F_tr, data.train_sites, tol=spec.vb_tol,
                     max_iter=spec.vb_max_iter)
        mean, _ = vb_point_predict(res, data.test_sites, F_te)
        out["BSPS-VB"] = {"mse": mse(mean, y_te), "converged": float(res.converged)}
    return out


@dataclass
class MetricsReport:
    """Per-replication metrics plus aggregated means and deciles."""

    spec: ExperimentSpec
    seeds: list
    records: list = field(default_factory=list)     # (rep, method, metric, value)
    failures: list = field(default_factory=list)    # (rep, message)

    def methods(self):
        seen = []
        for _, m, _, _ in self.records:
            if m not in seen:
                seen.append(m)
        return seen

    def values(self, method, metric):
        return np.array([v for _, m, k, v in self.records if m == method and k == metric])

    def metrics_of(self, method):
        seen = []
        for _, m, k, _ in self.records:
            if m == method and k not in seen:
                seen.append(k)
        return seen

    def median(self, method, metric):
        return float(np.median(self.values(method, metric)))

    def summary_rows(self):
        """One row per (method, metric): mean, 9 deciles, replication counts."""
        rows = []
        for method in self.methods():
            for metric in self.metrics_of(method):
                v = self.values(method, metric)
                q = np.quantile(v, DECILES)
                rows.append({"method": method, "metric": metric, "mean": float(v.mean()),
                             **{f"q{int(round(d * 100))}": float(x) for d, x in zip(DECILES, q)},
                             "n_ok": len(v), "n_failed": len(self.failures)})
        return rows

    @property
    def flagged(self):
        return bool(self.failures)


def _run_rep(args):
    spec, rep, seed = args
    with threadpool_limits(limits=1):
        try:
            return rep, run_one(spec, seed), None
        except (BSPSError, np.linalg.LinAlgError, ValueError) as err:
            return rep, None, f"{type(err).__name__}: {err}"


def run_replications(spec, n_reps, base_seed=0, parallelism=1, progress=None):
    """Replication r uses seed base_seed + r, so results do not depend on
    ``parallelism``. Failed replications are recorded and skipped."""
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    spec = spec if isinstance(spec, ExperimentSpec) else ExperimentSpec(spec)
    jobs = [(spec, r, base_seed + r) for r in range(n_reps)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_rep, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_rep(job))
            if progress is not None:
                progress(job[1])
    report = MetricsReport(spec, [s for _, _, s in jobs])
    for rep, metrics, err in sorted(results, key=lambda t: t[0]):
        if err is not None:
            logger.warning("replication %d failed: %s", rep, err)
            report.failures.append((rep, err))
            continue
        for method, vals in metrics.items():
            for metric, v in vals.items():
                report.records.append((rep, method, metric, float(v)))
    return report


def with_methods(spec, methods):
    return replace(spec, methods=tuple(methods))
