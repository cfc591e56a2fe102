"""Command-line interface: ``bsps fit | predict | simulate | bench``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Numerical kernels always run with single-threaded
BLAS so results do not depend on ``--threads``; the thread count only sets
the number of parallel replication workers in ``bench``.
"""
import argparse
from dataclasses import asdict, dataclass, field, replace
import logging
import os
from pathlib import Path
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .agents import BERNOULLI, GAUSSIAN
from .errors import (ArtifactMismatch, BSPSError, ConfigError, EmptyData, KindMismatch,
                     LengthMismatch, NotPositiveDefinite, RankDeficient, SamplerStall,
                     SchemaError, SingleClass, UnknownExperiment)
from .experiments import (EXPERIMENTS, ExperimentSpec, agent_forecasts, run_replications,
                          simulate_scenario, simulate_toy, scenario_agents, toy_agents)
from .gibbs import ChainConfig, PosteriorSamples, PriorConfig, run_chain
from .logistic import run_chain_binary
from .predict import predictive_draws, summarize, weight_shares
from .spatial import SiteSet
from .vb import RangeGrid, VBResult, VariationalState, run_vb, sample_variational

logger = logging.getLogger("bsps")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
KERNEL = "exponential"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    seed: int = 0
    method: str = "mcmc"
    alpha: float = 0.05
    threads: int = 1
    priors: PriorConfig = field(default_factory=PriorConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    vb_tol: float = 1e-6
    vb_max_iter: int = 500
    vb_grid_size: int = 20
    vb_n_draws: int = 1000
    experiment: str = "toy"
    p: int = 5
    reps: int = 1

    def echo(self):
        d = asdict(self)
        d.pop("threads")
        return d


_FLAG_KEYS = {
    "seed": "seed", "method": "method", "alpha": "alpha", "threads": "threads",
    "backend": "chain.backend", "m": "chain.m", "burn": "chain.n_burn",
    "keep": "chain.n_keep", "thin": "chain.thin", "experiment": "experiment.name",
    "p": "experiment.p", "reps": "experiment.reps",
}


def resolve_config(args, binary=False):
    """Config file values, overridden by explicit flags, then validated."""
    vals = io.read_config(args.config) if getattr(args, "config", None) else {}
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            vals[key] = v
    if "threads" not in vals:
        env = os.environ.get("BSPS_THREADS")
        if env:
            try:
                vals["threads"] = int(env)
            except ValueError:
                raise ConfigError(f"BSPS_THREADS must be an integer, got {env!r}") from None
    try:
        pri = {k.split(".", 1)[1]: v for k, v in vals.items() if k.startswith("priors.")}
        priors = PriorConfig(**pri)
        ch = {k.split(".", 1)[1]: v for k, v in vals.items() if k.startswith("chain.")}
        if binary:
            ch.setdefault("n_burn", 3000)
            ch.setdefault("n_keep", 7000)
        chain = ChainConfig(seed=vals.get("seed", 0), **ch)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    cfg = RunConfig(
        seed=vals.get("seed", 0), method=vals.get("method", "mcmc"),
        alpha=vals.get("alpha", 0.05), threads=vals.get("threads", 1),
        priors=priors, chain=chain,
        vb_tol=vals.get("vb.tol", 1e-6), vb_max_iter=vals.get("vb.max_iter", 500),
        vb_grid_size=vals.get("vb.grid_size", 20), vb_n_draws=vals.get("vb.n_draws", 1000),
        experiment=vals.get("experiment.name", "toy"), p=vals.get("experiment.p", 5),
        reps=vals.get("experiment.reps", 1),
    )
    if cfg.method not in ("mcmc", "vb"):
        raise ConfigError(f"method must be 'mcmc' or 'vb', got {cfg.method!r}")
    if not 0 < cfg.alpha < 1:
        raise ConfigError(f"alpha must lie strictly between 0 and 1, got {cfg.alpha}")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    if cfg.vb_tol <= 0 or cfg.vb_max_iter < 1 or cfg.vb_grid_size < 1 or cfg.vb_n_draws < 2:
        raise ConfigError("need vb.tol > 0, vb.max_iter >= 1, vb.grid_size >= 1, vb.n_draws >= 2")
    if cfg.reps < 1:
        raise ConfigError("reps must be >= 1")
    return cfg


def _config_dict(cfg):
    """JSON-safe echo of the run configuration."""
    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v
    return clean(cfg.echo())


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args):
    data = io.read_sites_csv(args.input, with_y=True)
    binary = data.forecasts.kind == BERNOULLI
    cfg = resolve_config(args, binary=binary)
    if not args.output:
        raise UsageError("fit needs --output")
    sites = SiteSet(data.coords, seed=cfg.seed)
    priors = cfg.priors.resolve(sites, data.forecasts.J)
    echo = {"command": "fit", "kernel": KERNEL, "kind": data.forecasts.kind,
            "J": data.forecasts.J, "n": data.n, "run": _config_dict(replace(cfg, priors=priors))}
    static = {"coords": sites.coords, "y": data.y}
    with threadpool_limits(limits=1):
        if cfg.method == "vb":
            if binary:
                raise KindMismatch("variational fit supports gaussian responses only")
            grid = RangeGrid.log_spaced(priors.g_lo, priors.g_hi, cfg.vb_grid_size)
            res = run_vb(data.y, data.forecasts, sites, priors, grid, cfg.vb_tol, cfg.vb_max_iter)
            st = res.state
            echo.update(method="vb", n_iter=res.n_iter, converged=res.converged)
            static.update(eta=grid.eta, m=st.m, s2=st.s2, mu=st.mu, Sigma=st.Sigma,
                          a_tau=st.a_tau, b_tau=st.b_tau, p=st.p,
                          a_sigma=np.array([st.a_sigma]), b_sigma=np.array([st.b_sigma]))
            io.write_artifact(args.output, echo, static)
            print(f"vb: {res.n_iter} sweeps, converged={res.converged}")
            return EXIT_OK
        runner = run_chain_binary if binary else run_chain
        s = runner(data.y, data.forecasts, sites, priors, cfg.chain)
    echo["method"] = "mcmc"
    static["accept_rate"] = s.accept_rate
    cols = {"f": s.f, "beta": s.beta, "tau": s.tau, "g": s.g}
    if binary:
        cols["omega"] = s.omega
    else:
        cols["sigma2"] = s.sigma2
    io.write_artifact(args.output, echo, static, cols)
    rates = ", ".join(f"g_{j}: {r:.3f}" for j, r in enumerate(s.accept_rate))
    print(f"mcmc: {s.n_draws} draws kept; MH acceptance {rates}")
    return EXIT_OK


def load_posterior(path, n_draws=1000, seed=0):
    """Artifact to PosteriorSamples (variational fits are sampled from q)."""
    echo, static, cols = io.read_artifact(path)
    if echo.get("kernel") != KERNEL:
        raise ArtifactMismatch(f"artifact kernel {echo.get('kernel')!r} is not {KERNEL!r}")
    run = echo["run"]
    pr = dict(run["priors"])
    pr["beta_bar"] = tuple(pr["beta_bar"])
    priors = PriorConfig(**pr)
    sites = SiteSet(static["coords"])
    if echo["method"] == "vb":
        st = VariationalState(static["m"], static["s2"], static["mu"], static["Sigma"],
                              static["a_tau"], static["b_tau"], static["p"],
                              float(static["a_sigma"][0]), float(static["b_sigma"][0]))
        res = VBResult(st, echo["n_iter"], echo["converged"], [], RangeGrid(static["eta"]),
                       sites, priors)
        return echo, sample_variational(res, n_draws, seed)
    K = cols["beta"].shape[0]
    sigma2 = cols.get("sigma2", np.full(K, np.nan))
    s = PosteriorSamples(cols["f"], cols["beta"], sigma2, cols["tau"], cols["g"],
                         static["accept_rate"], sites, priors, echo["kind"], cols.get("omega"))
    return echo, s


def cmd_predict(args):
    cfg = resolve_config(args)
    if not args.artifact or not args.output:
        raise UsageError("predict needs --artifact and --output")
    new = io.read_sites_csv(args.input, with_y=False)
    echo, samples = load_posterior(args.artifact, cfg.vb_n_draws, cfg.seed)
    if new.forecasts.J != echo["J"]:
        raise ArtifactMismatch(f"artifact has J={echo['J']} agents, new-site file has "
                               f"J={new.forecasts.J}")
    if new.forecasts.kind != echo["kind"]:
        raise ArtifactMismatch(f"artifact is {echo['kind']}, new-site file is "
                               f"{new.forecasts.kind}")
    with threadpool_limits(limits=1):
        draws = predictive_draws(samples, new.coords, new.forecasts,
                                 np.random.default_rng(cfg.seed))
    summ = summarize(draws, cfg.alpha)
    bmean = draws.beta.mean(axis=0)
    shares = weight_shares(bmean)
    J = echo["J"]
    header = ["s1", "s2", "mean", "lower", "upper"]
    header += [f"w_{j}" for j in range(J + 1)] + [f"ratio_{j}" for j in range(1, J + 1)]
    cols = [new.coords[:, 0], new.coords[:, 1], summ.mean, summ.lower, summ.upper]
    cols += [bmean[:, j] for j in range(J + 1)] + [shares[:, j] for j in range(J)]
    io.write_csv(args.output, header, cols)
    print(f"predicted {len(new.coords)} sites from {draws.n_draws} draws")
    return EXIT_OK


def cmd_simulate(args):
    cfg = resolve_config(args)
    if not args.output:
        raise UsageError("simulate needs --output (a directory)")
    name = cfg.experiment
    if name == "toy":
        data = simulate_toy(cfg.seed)
        agents = toy_agents(data)
    elif name in ("scenario1", "scenario2"):
        data = simulate_scenario(int(name[-1]), cfg.p, cfg.seed)
        agents = scenario_agents(data)
    else:
        raise UnknownExperiment(f"{name!r}; expected one of {', '.join(EXPERIMENTS)}")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    tr = agent_forecasts(agents, data.X_train, data.train_sites.coords)
    te = agent_forecasts(agents, data.X_test, data.test_sites.coords)
    io.write_sites_csv(out / "train.csv", data.train_sites.coords, tr, data.y_train)
    io.write_sites_csv(out / "test.csv", data.test_sites.coords, te)
    c = data.test_sites.coords
    io.write_csv(out / "truth.csv", ["s1", "s2", "y"], [c[:, 0], c[:, 1], data.y_test])
    print(f"wrote {name} dataset ({len(data.y_train)} train, {len(data.y_test)} test) to {out}")
    return EXIT_OK


def cmd_bench(args):
    cfg = resolve_config(args)
    if not args.output:
        raise UsageError("bench needs --output")
    if cfg.experiment not in EXPERIMENTS:
        raise UnknownExperiment(f"{cfg.experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
    spec = ExperimentSpec(cfg.experiment, p=cfg.p, n_burn=cfg.chain.n_burn,
                          n_keep=cfg.chain.n_keep, backend=cfg.chain.backend, m=cfg.chain.m,
                          alpha=cfg.alpha)
    if args.methods:
        spec = replace(spec, methods=tuple(args.methods.split(",")))
    report = run_replications(spec, cfg.reps, cfg.seed, parallelism=cfg.threads)
    rows = report.summary_rows()
    io.write_rows_csv(args.output, rows)
    for r in rows:
        if r["metric"] == "mse":
            print(f"{r['method']:>10}  median MSE {r['q50']:.4f}")
    if report.failures:
        print(f"{len(report.failures)} replication(s) failed", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="bsps", description="Bayesian spatial predictive synthesis")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output")
        sp.add_argument("--threads", type=int, help="worker count (default $BSPS_THREADS or 1)")

    def chain_flags(sp):
        sp.add_argument("--backend", choices=("full", "nngp"))
        sp.add_argument("--m", type=int, help="nearest neighbors for the nngp backend")
        sp.add_argument("--burn", type=int)
        sp.add_argument("--keep", type=int)
        sp.add_argument("--thin", type=int)

    fit = sub.add_parser("fit", help="fit the synthesis model to a CSV")
    common(fit)
    chain_flags(fit)
    fit.add_argument("--input", required=True)
    fit.add_argument("--method", choices=("mcmc", "vb"))
    fit.set_defaults(func=cmd_fit)

    pred = sub.add_parser("predict", help="predict at new sites from a fitted artifact")
    common(pred)
    pred.add_argument("--input", required=True, help="new-site CSV (no y column)")
    pred.add_argument("--artifact", required=True)
    pred.add_argument("--alpha", type=float)
    pred.set_defaults(func=cmd_predict)

    sim = sub.add_parser("simulate", help="write a simulated dataset")
    common(sim)
    sim.add_argument("--experiment")
    sim.add_argument("--p", type=int)
    sim.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("bench", help="run replications and write a metrics table")
    common(bench)
    chain_flags(bench)
    bench.add_argument("--experiment")
    bench.add_argument("--p", type=int)
    bench.add_argument("--reps", type=int)
    bench.add_argument("--alpha", type=float)
    bench.add_argument("--methods", help="comma list from BSPS,BSPS-VB,BMA,SA,agents")
    bench.set_defaults(func=cmd_bench)
    return p


_DATA_ERRORS = (SchemaError, EmptyData, LengthMismatch, KindMismatch, ArtifactMismatch,
                SingleClass, RankDeficient, OSError)
_NUMERIC_ERRORS = (NotPositiveDefinite, SamplerStall, np.linalg.LinAlgError)


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("bsps: a command is required (fit, predict, simulate, bench)")
        return args.func(args)
    except (UsageError, ConfigError, UnknownExperiment) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except BSPSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
