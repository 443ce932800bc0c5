"""Command-line pipeline: tessellate, emulate, calibrate, adjust, report, oracle, experiment."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .calibrator import (
    CalibrationProblem,
    CalibrationState,
    PriorSpec,
    ProposalConfig,
    calibration_transforms,
    mh_sample,
    posterior_fn,
    posterior_mode,
    with_theta,
)
from .covmodel import BlockGeometry, DiscrepancyCovParams, SpatialCovParams
from .emulator import EmulatorFit, fit_emulator, kriging_weights
from .errors import BlockCalError, ConfigError, EmptyChain
from .geo import random_tessellation, single_block
from .godambe import GodambeMatrices, LimitModel, adjust_chain_theta, compute_godambe, curvature_matrix
from .oracle import (
    ExperimentConfig,
    chain_summary,
    full_loglik,
    full_posterior_grid,
    grid_summary,
    kde_density,
    perfect_model_experiment,
    replicate_experiments,
    spatial_cov_dense,
)

ADJUSTMENTS = ("none", "open-faced", "curvature")


def bundled(name: str) -> str:
    return str(resources.files("blockcal") / "data" / name)


@dataclass
class PipelineConfig:
    grid: str = field(default_factory=lambda: bundled("grid.csv"))
    design: str = field(default_factory=lambda: bundled("design.csv"))
    ensemble: str = field(default_factory=lambda: bundled("ensemble.csv"))
    observations: str = field(default_factory=lambda: bundled("observations.csv"))
    M: int = 10
    m_max: int = 10
    seed: int = 1
    mode: str = "subsample"
    kappa_d_star: float = 160000.0
    zeta_d_mode: float = 0.01
    range_d_km: tuple[float, float] = (200.0, 5000.0)
    theta_bounds: tuple[tuple[float, float], ...] | None = None
    steps: int = 3000
    scales: tuple[float, ...] = (0.1, 0.05, 0.3, 0.01, 0.2)
    adjustment: str = "open-faced"
    oracle: bool = True
    oracle_points: int = 401
    experiment: dict = field(default_factory=dict)
    replicates: tuple[int, ...] = ()

    def __post_init__(self):
        self.range_d_km = tuple(float(x) for x in self.range_d_km)
        self.scales = tuple(float(x) for x in self.scales)
        self.replicates = tuple(int(x) for x in self.replicates)
        if self.theta_bounds is not None:
            self.theta_bounds = tuple(tuple(float(v) for v in b) for b in self.theta_bounds)
        if self.adjustment not in ADJUSTMENTS:
            raise ConfigError(f"adjustment must be one of {ADJUSTMENTS}, got {self.adjustment!r}")
        if self.adjustment != "none" and self.steps < 1000:
            raise ConfigError("adjustment needs a chain of at least 1000 steps")
        if self.mode not in ("exact", "subsample"):
            raise ConfigError("mode must be 'exact' or 'subsample'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["range_d_km"] = list(self.range_d_km)
        d["scales"] = list(self.scales)
        d["replicates"] = list(self.replicates)
        if self.theta_bounds is not None:
            d["theta_bounds"] = [list(b) for b in self.theta_bounds]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        d = io.read_json(path)
        base = Path(path).parent
        for k in ("grid", "design", "ensemble", "observations"):
            if k in d and not Path(d[k]).is_absolute():
                d[k] = str(base / d[k])
        return cls.from_dict(d)

    @property
    def tessellation_seed(self) -> int:
        return self.seed

    @property
    def mcmc_seed(self) -> int:
        return self.seed + 1


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

class Context:
    def __init__(self, config: PipelineConfig, out: Path, threads: int):
        self.config = config
        self.out = out
        self.threads = threads
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise ConfigError(f"missing upstream artifact {p}; run the earlier stage first")
        return p

    def grid(self):
        return io.read_grid(_exists(self.config.grid))

    def design(self):
        return io.read_design(_exists(self.config.design))

    def geometry(self, grid):
        return BlockGeometry(grid, io.read_blocking(self.need("blocking.json")))

    def meta(self, name: str, started: float, **extra):
        io.write_json(self.path(name + ".meta.json"),
                      {"elapsed_seconds": time.perf_counter() - started, "finished": time.time(), **extra})


def _exists(p) -> str:
    if not Path(p).exists():
        raise ConfigError(f"input file {p} does not exist")
    return str(p)


def _problem(ctx: Context):
    grid = ctx.grid()
    design = ctx.design()
    ens = io.read_ensemble(_exists(ctx.config.ensemble), grid, design)
    z = io.read_observations(_exists(ctx.config.observations), grid)
    geom = ctx.geometry(grid)
    fit = EmulatorFit.from_dict(io.read_json(ctx.need("emulator.json")))
    return grid, design, CalibrationProblem(z, ens, design, geom, fit, ctx.config.mode)


def _priors(cfg: PipelineConfig, fit: EmulatorFit, design) -> PriorSpec:
    bounds = cfg.theta_bounds or design.bounds
    return PriorSpec.informative(fit.xi_s.kappa_s, cfg.kappa_d_star, bounds, cfg.range_d_km, cfg.zeta_d_mode)


def _mode_of(ctx: Context, chain, lp):
    return CalibrationState.from_vector(posterior_mode(chain, lp), len(chain.names) - 4)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_tessellate(ctx: Context, args) -> dict:
    """Random nearest-centroid blocking of the grid."""
    t0 = time.perf_counter()
    grid = ctx.grid()
    b = (single_block(grid.n) if ctx.config.M == 1 else
         random_tessellation(grid, ctx.config.M, ctx.config.tessellation_seed, ctx.config.m_max))
    io.write_blocking(ctx.path("blocking.json"), b)
    ctx.meta("blocking", t0)
    s = b.sizes
    return {"blocks": int(b.M), "min_size": int(s.min()), "max_size": int(s.max()),
            "singletons": int(np.sum(s == 1))}


def cmd_emulate(ctx: Context, args) -> dict:
    """Fit the emulator by maximum composite likelihood."""
    t0 = time.perf_counter()
    grid = ctx.grid()
    design = ctx.design()
    ens = io.read_ensemble(_exists(ctx.config.ensemble), grid, design)
    geom = ctx.geometry(grid)
    fit = fit_emulator(ens, design, geom)
    io.write_json(ctx.path("emulator.json"), fit.to_dict())
    ctx.meta("emulator", t0)
    return {"loglik": fit.loglik, "converged": fit.converged}


def cmd_calibrate(ctx: Context, args) -> dict:
    """Sample the composite posterior with Metropolis-Hastings."""
    t0 = time.perf_counter()
    cfg = ctx.config
    grid, design, prob = _problem(ctx)
    lp = posterior_fn(prob, _priors(cfg, prob.fit, design), prob.q)
    chain_path = ctx.path("chain.csv")
    if args.resume:
        prev, _ = io.read_chain(ctx.need("chain.csv"))
        steps = args.steps or cfg.steps
        chain = mh_sample(lp, None, steps, prev.seed, resume=prev)
    else:
        steps = args.steps or cfg.steps
        lo_hi = cfg.theta_bounds or design.bounds
        mid = tuple(0.5 * (a + b) for a, b in lo_hi)
        base = CalibrationState(mid, prob.fit.xi_s.kappa_s, cfg.zeta_d_mode, cfg.kappa_d_star,
                                2.0 / (cfg.range_d_km[0] + cfg.range_d_km[1]))
        if prob.q == 1:
            coarse = np.linspace(*lo_hi[0], 101)[1:-1]
            best = coarse[int(np.argmax([lp(with_theta(base, t).to_vector()) for t in coarse]))]
            base = with_theta(base, best)
        scales = cfg.scales if len(cfg.scales) == prob.q + 4 else (cfg.scales[0],) * prob.q + cfg.scales[-4:]
        chain = mh_sample(lp, base.to_vector(), steps, cfg.mcmc_seed, calibration_transforms(prob.q),
                          ProposalConfig(scales=scales), names=base.names())
    io.write_chain(chain_path, chain)
    ctx.meta("chain", t0)
    return {"steps": int(chain.n_steps), "acceptance": [float(a) for a in chain.acceptance]}


def cmd_adjust(ctx: Context, args) -> dict:
    """Godambe matrices and the adjusted chain."""
    t0 = time.perf_counter()
    cfg = ctx.config
    grid, design, prob = _problem(ctx)
    chain, _ = io.read_chain(ctx.need("chain.csv"))
    if chain.n_steps == 0:
        raise EmptyChain("chain has no samples")
    lp = posterior_fn(prob, _priors(cfg, prob.fit, design), prob.q)
    psi_hat = _mode_of(ctx, chain, lp)
    if args.godambe:
        mats = GodambeMatrices.from_dict(io.read_json(args.godambe))
    else:
        th = np.array(psi_hat.theta_star)
        for k in range(th.size):
            if np.any(np.abs(design.thetas[:, k] - th[k]) < 1e-12):
                th[k] += 1e-7
        _, v = kriging_weights(th, design.thetas, prob.fit.xi_theta)
        mats = compute_godambe(LimitModel.from_emulator(prob, v0=v), with_theta(psi_hat, th))
    io.write_json(ctx.path("godambe.json"), mats.to_dict())
    io.write_json(ctx.path("mode.json"), psi_hat.to_dict())
    q = prob.q
    mode_theta = np.array(psi_hat.theta_star)
    how = "open-faced" if cfg.adjustment == "none" else cfg.adjustment
    if how == "open-faced":
        adj = replace(chain, samples=adjust_chain_theta(chain.samples, q, mats, mode_theta))
    else:
        D = curvature_matrix(mats.P_star, mats.Q_star)
        priors = _priors(cfg, prob.fit, design)

        def curv_loglik(psi):
            t = mode_theta + D @ (np.array(psi.theta_star) - mode_theta)
            return prob.loglik(with_theta(psi, t))

        lpc = posterior_fn(prob, priors, q, loglik=curv_loglik)
        adj = mh_sample(lpc, psi_hat.to_vector(), chain.n_steps, chain.seed, chain.transforms,
                        ProposalConfig(scales=chain.scales, warmup=chain.warmup), names=chain.names)
    io.write_chain(ctx.path("chain_adjusted.csv"), adj, adjusted=True)
    ctx.meta("chain_adjusted", t0, adjustment=how)
    return {"adjustment": how, "G": mats.G.tolist()}


def _report_one(chain, label: str, grid_points: int = 201):
    post = chain.post_warmup() if chain.n_steps > chain.warmup else chain.samples
    if post.shape[0] == 0:
        raise EmptyChain(f"chain {label} has no samples")
    mcse = chain.mcse() if post.shape[0] >= 4 else np.full(post.shape[1], np.nan)
    rows, dens = [], {}
    for k, name in enumerate(chain.names):
        x = post[:, k]
        pad = 0.1 * (np.ptp(x) or 1.0)
        g = np.linspace(x.min() - pad, x.max() + pad, grid_points)
        d = kde_density(x, g)
        s = chain_summary(x, float(g[int(np.argmax(d))]))
        s.update(name=name, mcse=float(mcse[k]))
        rows.append(s)
        dens[name] = (g, d)
    return rows, dens


def cmd_report(ctx: Context, args) -> dict:
    """Density tables and summaries for chain files."""
    t0 = time.perf_counter()
    paths = args.chains or [str(ctx.need("chain.csv"))]
    out = {}
    for p in paths:
        chain, adjusted = io.read_chain(p)
        label = Path(p).stem
        rows, dens = _report_one(chain, label)
        out[label] = {"adjusted": adjusted, "parameters": rows}
        for name, (g, d) in dens.items():
            io._write_csv(ctx.path(f"density_{label}_{name}.csv"), ["value", "density"],
                          [[io.fmt(a), io.fmt(b)] for a, b in zip(g, d)])
    io.write_json(ctx.path("report.json"), out)
    ctx.meta("report", t0)
    return {"chains": list(out)}


def cmd_oracle(ctx: Context, args) -> dict:
    """Full-likelihood posterior of a scalar theta* with nuisances fixed at the chain mode."""
    t0 = time.perf_counter()
    cfg = ctx.config
    grid, design, prob = _problem(ctx)
    if prob.q != 1:
        raise ConfigError("the oracle posterior grid supports scalar theta* only")
    chain, _ = io.read_chain(ctx.need("chain.csv"))
    lp = posterior_fn(prob, _priors(cfg, prob.fit, design), 1)
    mp = ctx.path("mode.json")
    psi_hat = CalibrationState.from_dict(io.read_json(mp)) if mp.exists() else _mode_of(ctx, chain, lp)
    xs = prob.fit.xi_s
    Ks = spatial_cov_dense(grid, SpatialCovParams(xs.zeta_s, psi_hat.kappa_s, xs.phi_s))
    Kd = spatial_cov_dense(grid, DiscrepancyCovParams(psi_hat.zeta_d, psi_hat.kappa_d, psi_hat.phi_d))

    def target(t):
        m, v = prob.emulator_at((t,))
        return full_loglik(prob.Z, m, v * Ks + Kd)

    lo, hi = (cfg.theta_bounds or design.bounds)[0]
    g = np.linspace(lo, hi, cfg.oracle_points)
    d = full_posterior_grid(g, target)
    io._write_csv(ctx.path("oracle_density.csv"), ["theta", "density"],
                  [[io.fmt(a), io.fmt(b)] for a, b in zip(g, d)])
    s = grid_summary(g, d)
    io.write_json(ctx.path("oracle.json"), {"summary": s, "psi_fixed": psi_hat.to_dict()})
    ctx.meta("oracle", t0)
    return s


def cmd_experiment(ctx: Context, args) -> dict:
    """Perfect-model experiment on the synthetic stand-in data."""
    t0 = time.perf_counter()
    cfg = ctx.config
    ecfg = ExperimentConfig.from_dict({**ExperimentConfig().to_dict(), **cfg.experiment})
    if cfg.replicates:
        reps = replicate_experiments(ecfg, cfg.replicates, ctx.threads)
    else:
        reps = [perfect_model_experiment(ecfg)]
    summary = []
    for k, r in enumerate(reps):
        d = r.to_dict()
        d.pop("timing")
        summary.append(d)
        g = r.densities["theta"]
        cols = [c for c in ("composite", "adjusted", "oracle") if c in r.densities]
        io._write_csv(ctx.path(f"experiment_density_{k:02d}.csv"), ["theta", *cols],
                      [[io.fmt(g[i]), *(io.fmt(r.densities[c][i]) for c in cols)] for i in range(g.size)])
    io.write_json(ctx.path("experiment.json"), {"replicates": summary})
    ctx.meta("experiment", t0, timing=[r.timing for r in reps])
    covers = [r.covers["composite"] for r in reps]
    return {"replicates": len(reps), "composite_coverage": int(sum(covers))}


COMMANDS = {
    "tessellate": cmd_tessellate,
    "emulate": cmd_emulate,
    "calibrate": cmd_calibrate,
    "adjust": cmd_adjust,
    "report": cmd_report,
    "oracle": cmd_oracle,
    "experiment": cmd_experiment,
}


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    # subcommand copies use SUPPRESS so they never clobber flags given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON pipeline configuration")
    p.add_argument("--seed", type=int, default=d(None), help="base seed overriding the config")
    p.add_argument("--threads", type=int, default=d(1), help="worker cap for replicate runs")
    p.add_argument("--out", default=d("out"), help="artifact directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blockcal", description="Block composite likelihood calibration pipeline")
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or "").split("\n")[0] or None)
        _global_flags(sp, suppress=True)
        if name == "calibrate":
            sp.add_argument("--resume", action="store_true", help="continue the chain in --out")
            sp.add_argument("--steps", type=int, help="number of (additional) steps")
        if name == "adjust":
            sp.add_argument("--godambe", help="use P*, Q* from this JSON instead of computing them")
        if name == "report":
            sp.add_argument("chains", nargs="*", help="chain CSV files (default: chain.csv in --out)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        ctx = Context(cfg, Path(args.out), args.threads)
        result = COMMANDS[args.command](ctx, args)
    except BlockCalError as e:
        print(json.dumps({"error": e.code, "message": str(e)}), file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
