"""Dense full-likelihood reference computations, the GP field sampler and
perfect-model experiments."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import gaussian_kde

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
from .covmodel import (
    LOG_2PI,
    BlockGeometry,
    DiscrepancyCovParams,
    SpatialCovParams,
    ThetaCovParams,
    chol_logdet,
    chol_quad,
    cholesky,
    spatial_kernel,
    theta_kernel_matrix,
)
from .emulator import EmulatorFit, ModelOutputEnsemble, ParameterDesign, fit_emulator, kriging_weights
from .geo import EARTH_RADIUS_KM, SpatialGrid, random_tessellation, single_block
from .godambe import LimitModel, compute_godambe, open_faced_adjust

DENSE_GUARD = 1500


def _guard(n: int, limit: int):
    if n > limit:
        raise ValueError(f"dense computation on n={n} exceeds the guard of {limit}")


def full_loglik(x, mean, cov) -> float:
    """Exact Gaussian log-density via Cholesky."""
    x = np.asarray(x, dtype=float).ravel()
    mean = np.broadcast_to(np.asarray(mean, dtype=float).ravel(), x.shape)
    L = cholesky(np.atleast_2d(np.asarray(cov, dtype=float)), "full covariance")
    return -0.5 * (x.size * LOG_2PI + chol_logdet(L) + chol_quad(L, x - mean))


def spatial_cov_dense(grid: SpatialGrid, params, radius: float = EARTH_RADIUS_KM,
                      limit: int = DENSE_GUARD) -> np.ndarray:
    _guard(grid.n, limit)
    return spatial_kernel(grid.distances(radius=radius), np.eye(grid.n), params)


def emulation_cov_dense(grid: SpatialGrid, xi_s: SpatialCovParams, thetas,
                        xi_theta: ThetaCovParams, limit: int = DENSE_GUARD) -> np.ndarray:
    """``Sigma_s (x) Sigma_theta``, matching the row-major ravel of the n x p ensemble."""
    _guard(grid.n * np.atleast_2d(thetas).shape[0], limit * 3)
    return np.kron(spatial_cov_dense(grid, xi_s, limit=limit), theta_kernel_matrix(thetas, thetas, xi_theta))


def calibration_moments_dense(grid: SpatialGrid, Y, thetas, xi_s: SpatialCovParams,
                              xi_theta: ThetaCovParams, theta_star, kappa_s: float,
                              xi_d: DiscrepancyCovParams, emulator_variance: float | None = None,
                              limit: int = DENSE_GUARD):
    """Mean and covariance of Z given the ensemble: ``Y w`` and ``v Sigma_s + Sigma_d``."""
    w, v = kriging_weights(theta_star, thetas, xi_theta)
    if emulator_variance is not None:
        v = emulator_variance
    Ks = spatial_cov_dense(grid, SpatialCovParams(xi_s.zeta_s, kappa_s, xi_s.phi_s), limit=limit)
    Kd = spatial_cov_dense(grid, xi_d, limit=limit)
    return np.asarray(Y) @ w, v * Ks + Kd


def full_posterior_grid(theta_grid, log_target) -> np.ndarray:
    """Density over a 1-D grid from ``log_target(theta)`` (log prior + log likelihood),
    normalised with the trapezoid rule."""
    t = np.asarray(theta_grid, dtype=float)
    if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
        raise ValueError("theta grid must be 1-D and strictly increasing")
    lp = np.array([log_target(x) for x in t], dtype=float)
    if not np.any(np.isfinite(lp)):
        raise ValueError("log target is -inf over the whole grid")
    dens = np.exp(lp - np.max(lp[np.isfinite(lp)]))
    dens[~np.isfinite(lp)] = 0.0
    return dens / trapezoid(dens, t)


def grid_summary(theta_grid, density) -> dict:
    """Mode, mean, sd and equal-tailed 95% interval of a gridded density."""
    t = np.asarray(theta_grid, dtype=float)
    d = np.asarray(density, dtype=float)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(t))])
    cdf /= cdf[-1]
    mean = trapezoid(t * d, t)
    sd = float(np.sqrt(max(trapezoid((t - mean) ** 2 * d, t), 0.0)))
    lo, hi = np.interp([0.025, 0.975], cdf, t)
    return {"mode": float(t[int(np.argmax(d))]), "mean": float(mean), "sd": sd,
            "lower": float(lo), "upper": float(hi)}


def sample_gp_field(grid: SpatialGrid, params, seed: int, radius: float = EARTH_RADIUS_KM,
                    size: int | None = None, limit: int = DENSE_GUARD) -> np.ndarray:
    """Zero-mean Gaussian draw(s) with the spatial exponential kernel of ``params``."""
    K = spatial_cov_dense(grid, params, radius, limit)
    L = cholesky(K, "field covariance")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(grid.n if size is None else (size, grid.n))
    return z @ L.T if size is not None else L @ z


# --------------------------------------------------------------------------
# perfect-model experiments
# --------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Settings of one synthetic-truth calibration run on the bundled stand-in data."""

    n: int = 200
    grid_seed: int = 11
    model_seed: int = 5
    design: tuple[float, ...] = (0.5, 1.1, 1.6, 2.153, 2.7, 3.2, 3.8, 4.3, 4.9, 5.5)
    truth: float = 2.153
    M: int = 10
    m_max: int = 10
    block_seed: int = 1
    mode: str = "subsample"
    zeta_d: float = 0.01
    kappa_d: float = 160000.0
    range_d_km: float = 690.0
    disc_seed: int = 101
    prior_range_km: tuple[float, float] = (200.0, 5000.0)
    steps: int = 3000
    mcmc_seed: int = 7
    scales: tuple[float, ...] = (0.1, 0.05, 0.3, 0.01, 0.2)
    adjust: bool = True
    oracle: bool = True
    oracle_points: int = 401
    dense_limit: int = DENSE_GUARD

    def __post_init__(self):
        self.design = tuple(float(x) for x in self.design)
        self.prior_range_km = tuple(float(x) for x in self.prior_range_km)
        self.scales = tuple(float(x) for x in self.scales)
        if self.truth not in self.design:
            raise ValueError("the design must contain the synthetic truth")
        if self.oracle and self.n > self.dense_limit:
            raise ValueError(f"oracle requested with n={self.n} above the dense guard {self.dense_limit}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("design", "prior_range_km", "scales"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)


@dataclass
class ExperimentData:
    grid: SpatialGrid
    model: object
    design: ParameterDesign
    ensemble: ModelOutputEnsemble
    geom: BlockGeometry


def experiment_data(config: ExperimentConfig) -> ExperimentData:
    """Grid, model, training design without the truth run, and the blocking geometry."""
    from .datasets import synthetic_model, two_region_grid

    grid = two_region_grid(config.n, config.grid_seed)
    model = synthetic_model(grid, config.model_seed)
    full = ParameterDesign(np.asarray(config.design)[:, None], bounds=((min(config.design), max(config.design)),))
    k = list(config.design).index(config.truth)
    train = full.drop(k)
    ens = ModelOutputEnsemble(model.run(train.thetas[:, 0]))
    if config.M == 1:
        blocking = single_block(grid.n)
    else:
        blocking = random_tessellation(grid, config.M, config.block_seed, config.m_max)
    return ExperimentData(grid, model, train, ens, BlockGeometry(grid, blocking))


@dataclass
class ExperimentReport:
    truth: float
    composite: dict
    adjusted: dict | None
    oracle: dict | None
    psi_mode: dict
    godambe: dict | None
    covers: dict
    timing: dict
    config: dict
    densities: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"truth": self.truth, "composite": self.composite, "adjusted": self.adjusted,
                "oracle": self.oracle, "psi_mode": self.psi_mode, "godambe": self.godambe,
                "covers": self.covers, "timing": self.timing, "config": self.config}


def chain_summary(x, mode: float | None = None) -> dict:
    """Mean, sd and equal-tailed 95% interval of samples; ``mode`` passed through."""
    x = np.asarray(x, dtype=float)
    lo, hi = np.quantile(x, [0.025, 0.975])
    out = {"mean": float(np.mean(x)), "sd": float(np.std(x, ddof=1)),
           "lower": float(lo), "upper": float(hi), "width": float(hi - lo)}
    if mode is not None:
        out["mode"] = float(mode)
    return out


def _differentiable_theta(theta, thetas, eps=1e-7):
    t = np.atleast_1d(np.asarray(theta, dtype=float)).copy()
    for k in range(t.size):
        if np.any(np.abs(thetas[:, k] - t[k]) < 1e-12):
            t[k] += eps
    return t


def perfect_model_experiment(config: ExperimentConfig, data: ExperimentData | None = None,
                             fit: EmulatorFit | None = None) -> ExperimentReport:
    """Hold out the truth run, add a discrepancy draw, fit, calibrate, adjust and compare.

    ``data`` and ``fit`` may be passed to reuse an emulator across replicates
    that differ only in their discrepancy seed.
    """
    t0 = time.perf_counter()
    data = data or experiment_data(config)
    if fit is None:
        fit = fit_emulator(data.ensemble, data.design, data.geom)
    t_fit = time.perf_counter()

    z = data.model.run(config.truth)[:, 0] + sample_gp_field(
        data.grid, DiscrepancyCovParams(config.zeta_d, config.kappa_d, 1.0 / config.range_d_km),
        config.disc_seed, limit=config.dense_limit)
    problem = CalibrationProblem(z, data.ensemble, data.design, data.geom, fit, config.mode)
    priors = PriorSpec.informative(fit.xi_s.kappa_s, config.kappa_d, data.design.bounds,
                                   config.prior_range_km, config.zeta_d)
    lp = posterior_fn(problem, priors, 1)

    # start at the best theta on a coarse grid with nuisances at their prior modes
    lo, hi = data.design.bounds[0]
    base = CalibrationState((0.5 * (lo + hi),), fit.xi_s.kappa_s, config.zeta_d, config.kappa_d,
                            1.0 / config.range_d_km)
    coarse = np.linspace(lo, hi, 101)[1:-1]
    start = coarse[int(np.argmax([lp(with_theta(base, t).to_vector()) for t in coarse]))]
    chain = mh_sample(lp, with_theta(base, start).to_vector(), config.steps, config.mcmc_seed,
                      calibration_transforms(1), ProposalConfig(scales=config.scales), names=base.names())
    mode_vec = posterior_mode(chain, lp)
    psi_hat = CalibrationState.from_vector(mode_vec, 1)
    theta_s = chain.post_warmup()[:, 0]
    composite = chain_summary(theta_s, psi_hat.theta_star[0])
    composite["mcse"] = float(chain.mcse()[0])
    composite["acceptance"] = float(chain.acceptance[0])
    t_mcmc = time.perf_counter()

    grid_t = np.linspace(lo, hi, config.oracle_points)
    dens = {"theta": grid_t, "composite": kde_density(theta_s, grid_t)}
    adjusted = god = None
    if config.adjust:
        th = _differentiable_theta(psi_hat.theta_star, data.design.thetas)
        psi_d = with_theta(psi_hat, th)
        _, v = kriging_weights(th, data.design.thetas, fit.xi_theta)
        lm = LimitModel.from_emulator(problem, v0=v)
        mats = compute_godambe(lm, psi_d)
        adj = open_faced_adjust(theta_s[:, None], mats.P_star, mats.Q_star, psi_hat.theta_star)[:, 0]
        adjusted = chain_summary(adj, psi_hat.theta_star[0])
        god = mats.to_dict()
        dens["adjusted"] = kde_density(adj, grid_t)
    t_adj = time.perf_counter()

    oracle = None
    if config.oracle:
        xd = DiscrepancyCovParams(psi_hat.zeta_d, psi_hat.kappa_d, psi_hat.phi_d)
        Ks = spatial_cov_dense(data.grid, SpatialCovParams(fit.xi_s.zeta_s, psi_hat.kappa_s, fit.xi_s.phi_s),
                               limit=config.dense_limit)
        Kd = spatial_cov_dense(data.grid, xd, limit=config.dense_limit)

        def target(t):
            w, v = problem.emulator_at((t,))
            return full_loglik(z, w, v * Ks + Kd)

        d = full_posterior_grid(grid_t, target)
        oracle = grid_summary(grid_t, d)
        oracle["width"] = oracle["upper"] - oracle["lower"]
        dens["oracle"] = d
    t_end = time.perf_counter()

    covers = {"composite": composite["lower"] <= config.truth <= composite["upper"]}
    if adjusted is not None:
        covers["adjusted"] = adjusted["lower"] <= config.truth <= adjusted["upper"]
    if oracle is not None:
        covers["oracle"] = oracle["lower"] <= config.truth <= oracle["upper"]
        covers["mode_within_oracle_sd"] = abs(composite["mode"] - oracle["mode"]) <= oracle["sd"]
    timing = {"fit": t_fit - t0, "mcmc": t_mcmc - t_fit, "adjust": t_adj - t_mcmc,
              "oracle": t_end - t_adj, "total": t_end - t0}
    return ExperimentReport(config.truth, composite, adjusted, oracle, psi_hat.to_dict(), god,
                            {k: bool(v) for k, v in covers.items()}, timing, config.to_dict(), dens)


def kde_density(x, grid) -> np.ndarray:
    """Gaussian kernel density estimate with Silverman bandwidth."""
    x = np.asarray(x, dtype=float)
    if np.ptp(x) == 0:
        return np.where(np.isclose(grid, x[0]), np.inf, 0.0)
    return gaussian_kde(x, bw_method="silverman")(grid)


def replicate_experiments(config: ExperimentConfig, disc_seeds, threads: int = 1,
                          data: ExperimentData | None = None, fit: EmulatorFit | None = None):
    """Replicates differing only in the discrepancy seed, sharing one emulator fit."""
    data = data or experiment_data(config)
    fit = fit or fit_emulator(data.ensemble, data.design, data.geom)
    cfgs = [replace(config, disc_seed=int(s), mcmc_seed=config.mcmc_seed + k)
            for k, s in enumerate(disc_seeds)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(lambda c: perfect_model_experiment(c, data, fit), cfgs))
    return [perfect_model_experiment(c, data, fit) for c in cfgs]


def block_count_sweep(config: ExperimentConfig, Ms, disc_seeds=(101,), threads: int = 1) -> dict:
    """Rerun the experiment per block count; tabulate mode bias and interval width."""
    rows = []
    for M in Ms:
        cfg = replace(config, M=int(M))
        reps = replicate_experiments(cfg, disc_seeds, threads)
        widths = [r.composite["width"] for r in reps]
        bias = [r.composite["mode"] - config.truth for r in reps]
        rows.append({"M": int(M), "mean_width": float(np.mean(widths)), "mean_bias": float(np.mean(bias)),
                     "widths": widths, "bias": bias,
                     "adjusted_widths": [r.adjusted["width"] for r in reps if r.adjusted]})
    return {"truth": config.truth, "rows": rows}



def dispersion_sweep(config: ExperimentConfig, kappas, disc_seeds=(101,), threads: int = 1) -> dict:
    """Rerun the experiment per discrepancy sill; the prior for kappa_d follows each truth.

    Replicates share discrepancy seeds across sills, so each field is the same
    draw rescaled and the comparison is paired.
    """
    data = experiment_data(config)
    fit = fit_emulator(data.ensemble, data.design, data.geom)
    rows = []
    for k in kappas:
        reps = replicate_experiments(replace(config, kappa_d=float(k)), disc_seeds, threads, data, fit)
        widths = [r.composite["width"] for r in reps]
        rows.append({"kappa_d": float(k), "mean_width": float(np.mean(widths)), "widths": widths,
                     "bias": [r.composite["mode"] - config.truth for r in reps]})
    return {"truth": config.truth, "rows": rows}

def measurement_error_mc(n: int = 100, M: int = 5, reps: int = 500, seed: int = 0,
                         theta0: float = 2.153, v0: float = 0.02, half_width: float = 1.0) -> dict:
    """Sampling variance of the maximum composite likelihood estimate of a scalar theta.

    Observations follow the limit model around the synthetic response with
    nuisance parameters fixed at their true values; each replicate maximises
    the limit composite likelihood over ``theta0 +- half_width``.
    """
    from scipy.optimize import minimize_scalar

    from .datasets import synthetic_model, two_region_grid
    from .godambe import godambe_information

    grid = two_region_grid(n, seed=3)
    model = synthetic_model(grid, seed=9)
    geom = BlockGeometry(grid, random_tessellation(grid, M, 2))

    def mean_fn(t):
        t = float(np.atleast_1d(t)[0])
        return model.run(t)[:, 0], (model.amp / t)[:, None]

    xi_s = SpatialCovParams(0.005, 1e6, 1.0 / 5000.0)
    psi = CalibrationState((theta0,), 1e6, 0.01, 160000.0, 1.0 / 690.0)
    lm = LimitModel.measurement_error(np.zeros(n), geom, xi_s, mean_fn, v0)
    P, Q = lm.P_star(psi), lm.Q_star(psi)
    G = godambe_information(P, Q)
    L = cholesky(lm.true_covariance(psi), "true covariance")
    rng = np.random.default_rng(seed)
    y0 = mean_fn(theta0)[0]
    est = []
    for _ in range(reps):
        m = lm.observe(y0 + L @ rng.standard_normal(n))
        res = minimize_scalar(lambda t: -m.loglik(with_theta(psi, t)), method="bounded",
                              bounds=(theta0 - half_width, theta0 + half_width), options={"xatol": 1e-8})
        est.append(res.x)
    est = np.array(est)
    var = float(np.var(est, ddof=1))
    target = float(1.0 / G[0, 0])
    return {"empirical_var": var, "godambe_var": target, "inverse_Q": float(1.0 / Q[0, 0]),
            "P": float(P[0, 0]), "Q": float(Q[0, 0]), "rel_error": abs(var - target) / target,
            "mean_bias": float(est.mean() - theta0), "estimates": est}
