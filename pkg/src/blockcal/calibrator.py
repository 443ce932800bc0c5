"""Calibration stage: observation composite likelihood, priors and Metropolis-Hastings."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .covmodel import (
    LOG_2PI,
    BlockGeometry,
    SpatialCovParams,
    chol_logdet,
    chol_quad,
    cholesky,
)
from .emulator import EmulatorFit, ModelOutputEnsemble, ParameterDesign, kriging_weights
from .errors import (
    DimensionMismatch,
    EmptyChain,
    InitInfeasible,
    NotPositiveDefinite,
    OptimizerDiverged,
)

NUISANCE = ("kappa_s", "zeta_d", "kappa_d", "phi_d")


@dataclass(frozen=True)
class ObservationField:
    Z: np.ndarray

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float).ravel()
        if not np.all(np.isfinite(Z)):
            raise ValueError("observations contain non-finite values")
        object.__setattr__(self, "Z", Z)

    @property
    def n(self) -> int:
        return self.Z.size


@dataclass(frozen=True)
class CalibrationState:
    """Calibration parameters psi = (theta*, kappa_s, zeta_d, kappa_d, phi_d)."""

    theta_star: tuple[float, ...]
    kappa_s: float
    zeta_d: float
    kappa_d: float
    phi_d: float

    def __post_init__(self):
        object.__setattr__(self, "theta_star", tuple(float(t) for t in np.atleast_1d(self.theta_star)))

    @property
    def q(self) -> int:
        return len(self.theta_star)

    def names(self) -> list[str]:
        th = ["theta_star"] if self.q == 1 else [f"theta_star_{k + 1}" for k in range(self.q)]
        return th + list(NUISANCE)

    def to_vector(self) -> np.ndarray:
        return np.array([*self.theta_star, self.kappa_s, self.zeta_d, self.kappa_d, self.phi_d])

    @classmethod
    def from_vector(cls, x, q: int) -> "CalibrationState":
        x = np.asarray(x, dtype=float)
        return cls(tuple(x[:q]), *map(float, x[q:q + 4]))

    def transforms(self) -> list[str]:
        return ["identity"] * self.q + ["log"] * 4

    def to_dict(self) -> dict:
        return {"theta_star": list(self.theta_star), "kappa_s": self.kappa_s,
                "zeta_d": self.zeta_d, "kappa_d": self.kappa_d, "phi_d": self.phi_d}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationState":
        return cls(tuple(d["theta_star"]), float(d["kappa_s"]), float(d["zeta_d"]),
                   float(d["kappa_d"]), float(d["phi_d"]))


# --------------------------------------------------------------------------
# likelihood
# --------------------------------------------------------------------------

class CalibrationProblem:
    """Observation composite likelihood with all parameter-free pieces precomputed.

    Emulator quantities other than ``kappa_s`` are held at their fitted values.
    Block-mean covariances use ``mode`` ("exact" or "subsample") for both H
    and Omega; within-block terms always use every block location.
    """

    def __init__(self, Z, ensemble, design, geom: BlockGeometry, fit: EmulatorFit, mode: str = "exact"):
        self.Z = Z.Z if isinstance(Z, ObservationField) else np.asarray(Z, dtype=float).ravel()
        self.Y = ensemble.Y if isinstance(ensemble, ModelOutputEnsemble) else np.asarray(ensemble, dtype=float)
        self.thetas = design.thetas if isinstance(design, ParameterDesign) else np.atleast_2d(design)
        if self.Z.size != geom.n or self.Y.shape[0] != geom.n:
            raise DimensionMismatch(f"Z ({self.Z.size}) / Y ({self.Y.shape[0]}) vs grid n={geom.n}")
        if self.Y.shape[1] != self.thetas.shape[0]:
            raise DimensionMismatch("ensemble columns do not match design points")
        self.geom = geom
        self.fit = fit
        self.mode = mode
        self.q = self.thetas.shape[1]
        unit = SpatialCovParams(fit.xi_s.zeta_s, 1.0, fit.xi_s.phi_s)
        from .covmodel import block_internal_cov, block_mean_cov

        self.H_unit = block_mean_cov(geom, unit, mode)
        self.Gam_unit, self.gam_unit = [], []
        for i in range(geom.M):
            G, g = block_internal_cov(geom, i, unit)
            self.Gam_unit.append(G)
            self.gam_unit.append(g)
        self._nugget_mean = np.diag(1.0 / geom.sizes)
        self.Zbar = geom.block_means(self.Z)
        self.Z_blocks = [geom.block_rows(self.Z, i) for i in range(geom.M)]
        self._nu = [np.full(ni - 1, 1.0 / ni) for ni in geom.sizes]
        self._eyes = [np.eye(ni - 1) for ni in geom.sizes]
        self._disc_cache: dict[float, tuple] = {}
        self._krig_cache: dict[tuple, tuple] = {}

    # pieces of the discrepancy covariance that depend on phi_d only
    def _disc_unit(self, phi_d: float):
        hit = self._disc_cache.get(phi_d)
        if hit is not None:
            return hit
        om = self.geom.block_average(lambda D, same: np.exp(-phi_d * D), self.mode)
        lam = []
        for D in self.geom.block_distances:
            E = np.exp(-phi_d * D)
            lam.append((E[:-1, :-1], E[:-1, :].mean(axis=1)))
        if len(self._disc_cache) > 8:
            self._disc_cache.clear()
        self._disc_cache[phi_d] = (om, lam)
        return om, lam

    def discrepancy_blocks(self, zeta_d, kappa_d, phi_d):
        """Omega and per-block (Lambda_i, lambda_i)."""
        om, lam = self._disc_unit(float(phi_d))
        Omega = kappa_d * (zeta_d * self._nugget_mean + om)
        blocks = []
        for i, (E, e) in enumerate(lam):
            Lam = kappa_d * (zeta_d * self._eyes[i] + E)
            lamv = kappa_d * (e + zeta_d * self._nu[i])
            blocks.append((Lam, lamv))
        return Omega, blocks

    def emulator_at(self, theta_star):
        """Emulator mean over the grid and the parameter-space predictive variance."""
        key = tuple(np.atleast_1d(theta_star).astype(float))
        hit = self._krig_cache.get(key)
        if hit is None:
            w, v = kriging_weights(theta_star, self.thetas, self.fit.xi_theta)
            if len(self._krig_cache) > 64:
                self._krig_cache.clear()
            hit = self._krig_cache[key] = (self.Y @ w, v)
        return hit

    def moments(self, psi: CalibrationState, emulator_variance: float | None = None):
        """Conditional means/covariances of the block-mean and within-block factors."""
        if psi.q != self.q:
            raise DimensionMismatch(f"theta* has length {psi.q}, design has q={self.q}")
        m, v = self.emulator_at(psi.theta_star)
        if emulator_variance is not None:
            v = emulator_variance
        Omega, dblocks = self.discrepancy_blocks(psi.zeta_d, psi.kappa_d, psi.phi_d)
        S = v * psi.kappa_s * self.H_unit + Omega
        mbar = self.geom.block_means(m)
        blocks = []
        for i in range(self.geom.M):
            Lam, lamv = dblocks[i]
            tau = v * psi.kappa_s * self.gam_unit[i]
            c = tau + lamv
            B = v * psi.kappa_s * self.Gam_unit[i] + Lam
            blocks.append((c, B))
        return m, mbar, S, blocks

    def terms(self, psi: CalibrationState, emulator_variance: float | None = None):
        m, mbar, S, blocks = self.moments(psi, emulator_variance)
        M = self.geom.M
        LS = cholesky(S, "Sigma_Zbar")
        r = self.Zbar - mbar
        mean_term = -0.5 * (M * LOG_2PI + chol_logdet(LS) + chol_quad(LS, r))
        out = []
        for i, (c, B) in enumerate(blocks):
            ni = self.geom.sizes[i]
            if ni < 2:
                out.append(0.0)
                continue
            sii = S[i, i]
            C = B - np.outer(c, c) / sii
            LC = cholesky(C, f"conditional covariance of block {i}")
            mu = self.geom.block_rows(m, i)[:-1] + c / sii * r[i]
            e = self.Z_blocks[i][:-1] - mu
            out.append(-0.5 * ((ni - 1) * LOG_2PI + chol_logdet(LC) + chol_quad(LC, e)))
        return mean_term, out

    def loglik(self, psi: CalibrationState, emulator_variance: float | None = None) -> float:
        mean_term, block_terms = self.terms(psi, emulator_variance)
        return mean_term + float(np.sum(block_terms))


def calib_cloglik(psi: CalibrationState, Z, ensemble, design, geom: BlockGeometry,
                  fit: EmulatorFit, mode: str = "exact") -> float:
    """Log composite likelihood of the observations at ``psi``."""
    return CalibrationProblem(Z, ensemble, design, geom, fit, mode).loglik(psi)


# --------------------------------------------------------------------------
# priors and posterior
# --------------------------------------------------------------------------

def invgamma_logpdf(x: float, a: float, b: float) -> float:
    if x <= 0:
        return -np.inf
    return a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x


@dataclass(frozen=True)
class PriorSpec:
    """Inverse-gamma (shape, scale) priors for kappa_s, kappa_d, zeta_d;
    uniform priors for phi_d and theta*.

    The phi_d support is given as a range of correlation lengths ``1/phi_d``
    in km; the density is uniform in phi_d over the implied interval.
    """

    kappa_s: tuple[float, float]
    kappa_d: tuple[float, float]
    zeta_d: tuple[float, float]
    range_d_km: tuple[float, float]
    theta_bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        for name in ("kappa_s", "kappa_d", "zeta_d"):
            a, b = getattr(self, name)
            if a <= 0 or b <= 0:
                raise ValueError(f"{name} prior needs positive shape and scale")
        lo, hi = self.range_d_km
        if not 0 < lo < hi:
            raise ValueError("range_d_km must satisfy 0 < low < high")
        for lo, hi in self.theta_bounds:
            if not lo < hi:
                raise ValueError("theta bounds must be non-degenerate")

    @classmethod
    def informative(cls, kappa_s_hat: float, kappa_d_star: float, theta_bounds,
                    range_d_km=(800.0, 20000.0), zeta_d_mode: float = 0.01) -> "PriorSpec":
        """Priors whose modes sit at the given targets: IG(a, target * (a + 1))."""
        return cls(
            kappa_s=(20.0, kappa_s_hat * 21.0),
            kappa_d=(10000.0, kappa_d_star * 10001.0),
            zeta_d=(2.0, zeta_d_mode * 3.0),
            range_d_km=tuple(range_d_km),
            theta_bounds=tuple(tuple(map(float, b)) for b in theta_bounds),
        )

    @property
    def phi_d_bounds(self) -> tuple[float, float]:
        return 1.0 / self.range_d_km[1], 1.0 / self.range_d_km[0]

    def to_dict(self) -> dict:
        return {"kappa_s": list(self.kappa_s), "kappa_d": list(self.kappa_d),
                "zeta_d": list(self.zeta_d), "range_d_km": list(self.range_d_km),
                "theta_bounds": [list(b) for b in self.theta_bounds]}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        return cls(tuple(d["kappa_s"]), tuple(d["kappa_d"]), tuple(d["zeta_d"]),
                   tuple(d["range_d_km"]), tuple(tuple(b) for b in d["theta_bounds"]))


def log_prior(psi: CalibrationState, priors: PriorSpec) -> float:
    if len(priors.theta_bounds) != psi.q:
        raise DimensionMismatch("prior theta bounds do not match theta*")
    lp = 0.0
    for t, (lo, hi) in zip(psi.theta_star, priors.theta_bounds):
        if not lo <= t <= hi:
            return -np.inf
        lp -= np.log(hi - lo)
    plo, phi = priors.phi_d_bounds
    if not plo <= psi.phi_d <= phi:
        return -np.inf
    lp -= np.log(phi - plo)
    lp += invgamma_logpdf(psi.kappa_s, *priors.kappa_s)
    lp += invgamma_logpdf(psi.kappa_d, *priors.kappa_d)
    lp += invgamma_logpdf(psi.zeta_d, *priors.zeta_d)
    return float(lp)


def log_posterior(psi: CalibrationState, problem: CalibrationProblem, priors: PriorSpec,
                  loglik: Callable | None = None) -> float:
    """Prior plus composite log likelihood; prior-infeasible points skip the likelihood."""
    lp = log_prior(psi, priors)
    if not np.isfinite(lp):
        return -np.inf
    ll = problem.loglik(psi) if loglik is None else loglik(psi)
    return lp + ll


def posterior_fn(problem: CalibrationProblem, priors: PriorSpec, q: int,
                 loglik: Callable | None = None) -> Callable[[np.ndarray], float]:
    """Log-posterior over flat psi vectors; factorisation failures count as -inf."""

    def f(x):
        try:
            return log_posterior(CalibrationState.from_vector(x, q), problem, priors, loglik)
        except NotPositiveDefinite:
            return -np.inf

    return f


# --------------------------------------------------------------------------
# Metropolis-Hastings
# --------------------------------------------------------------------------

def _to_u(x, transforms):
    x = np.asarray(x, dtype=float)
    return np.array([np.log(v) if t == "log" else v for v, t in zip(x, transforms)])


def _to_x(u, transforms):
    return np.array([np.exp(v) if t == "log" else v for v, t in zip(u, transforms)])


def _log_jac(u, transforms) -> float:
    return float(sum(v for v, t in zip(u, transforms) if t == "log"))


@dataclass
class ProposalConfig:
    """Componentwise Gaussian random-walk settings on the transformed scale."""

    scales: Sequence[float] | float = 0.1
    warmup: int | None = None
    warmup_frac: float = 0.3
    adapt_every: int = 50
    target: tuple[float, float] = (0.2, 0.45)
    shrink: float = 0.7
    grow: float = 1.4
    min_scale: float = 1e-12

    def to_dict(self) -> dict:
        s = self.scales
        return {"scales": list(map(float, s)) if np.ndim(s) else float(s), "warmup": self.warmup,
                "warmup_frac": self.warmup_frac, "adapt_every": self.adapt_every,
                "target": list(self.target), "shrink": self.shrink, "grow": self.grow}

    @classmethod
    def from_dict(cls, d: dict) -> "ProposalConfig":
        d = dict(d)
        if "target" in d:
            d["target"] = tuple(d["target"])
        return cls(**d)


@dataclass
class PosteriorChain:
    samples: np.ndarray
    logpost: np.ndarray
    names: list[str]
    transforms: list[str]
    seed: int
    warmup: int
    scales: np.ndarray
    scale_history: list[list[float]]
    accepted: np.ndarray
    accepted_post: np.ndarray
    rng_state: dict = field(repr=False, default_factory=dict)
    window_accepts: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return self.samples.shape[0]

    def post_warmup(self) -> np.ndarray:
        return self.samples[self.warmup:]

    @property
    def acceptance(self) -> np.ndarray:
        """Per-coordinate acceptance rate after warm-up."""
        n = max(self.n_steps - self.warmup, 1)
        return self.accepted_post / n

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.acceptance))

    def mcse(self) -> np.ndarray:
        return batch_means_mcse(self.post_warmup())

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, self.names.index(name)]

    def sidecar(self) -> dict:
        return {
            "seed": int(self.seed),
            "names": self.names,
            "transforms": self.transforms,
            "n_steps": int(self.n_steps),
            "warmup": int(self.warmup),
            "acceptance": [float(a) for a in self.acceptance],
            "acceptance_rate": self.acceptance_rate,
            "mcse": [float(v) for v in self.mcse()] if self.n_steps > self.warmup + 1 else [],
            "proposal_scales": [float(s) for s in self.scales],
            "scale_history": self.scale_history,
            "accepted": [int(a) for a in self.accepted],
            "accepted_post": [int(a) for a in self.accepted_post],
            "window_accepts": [int(a) for a in (self.window_accepts if self.window_accepts is not None
                                                 else np.zeros(len(self.names)))],
            "rng_state": self.rng_state,
        }

    @classmethod
    def from_arrays(cls, samples, logpost, sidecar: dict) -> "PosteriorChain":
        return cls(
            samples=np.asarray(samples, dtype=float),
            logpost=np.asarray(logpost, dtype=float),
            names=list(sidecar["names"]),
            transforms=list(sidecar["transforms"]),
            seed=int(sidecar["seed"]),
            warmup=int(sidecar["warmup"]),
            scales=np.asarray(sidecar["proposal_scales"], dtype=float),
            scale_history=[list(s) for s in sidecar.get("scale_history", [])],
            accepted=np.asarray(sidecar.get("accepted", np.zeros(len(sidecar["names"]))), dtype=int),
            accepted_post=np.asarray(sidecar.get("accepted_post", np.zeros(len(sidecar["names"]))), dtype=int),
            rng_state=sidecar.get("rng_state", {}),
            window_accepts=np.asarray(sidecar.get("window_accepts", np.zeros(len(sidecar["names"]))), dtype=int),
        )


def batch_means_mcse(x: np.ndarray) -> np.ndarray:
    """Monte Carlo standard error per column with floor(sqrt(N)) batches."""
    x = np.atleast_2d(np.asarray(x, dtype=float).T).T
    N = x.shape[0]
    if N < 4:
        return np.full(x.shape[1], np.nan)
    nb = int(np.floor(np.sqrt(N)))
    size = N // nb
    means = x[: nb * size].reshape(nb, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(nb)


def mh_sample(log_target: Callable[[np.ndarray], float], init, steps: int, seed: int,
              transforms: Sequence[str] | None = None, config: ProposalConfig | None = None,
              names: Sequence[str] | None = None, resume: PosteriorChain | None = None) -> PosteriorChain:
    """Componentwise random-walk Metropolis-Hastings.

    Each step sweeps every coordinate once. Positive coordinates move on the
    log scale (with the Jacobian added to the target). During warm-up each
    coordinate's step size is shrunk or grown every ``adapt_every`` steps
    until its acceptance rate lies in ``config.target``; it is frozen after.

    With ``resume`` the chain continues from the stored state, RNG and
    adaptation counters, returning the concatenated chain.
    """
    config = config or ProposalConfig()
    if resume is not None:
        x = resume.samples[-1].copy()
        transforms = list(resume.transforms)
        names = list(resume.names)
        seed = resume.seed
    else:
        x = np.asarray(init.to_vector() if isinstance(init, CalibrationState) else init, dtype=float)
    d = x.size
    transforms = list(transforms) if transforms is not None else ["identity"] * d
    names = list(names) if names is not None else [f"x{k}" for k in range(d)]
    if len(transforms) != d or len(names) != d:
        raise DimensionMismatch("transforms/names must match the parameter dimension")

    if resume is not None:
        warmup = resume.warmup
        scales = resume.scales.copy()
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start = resume.n_steps
        history = [list(s) for s in resume.scale_history]
        accepted = resume.accepted.copy()
        accepted_post = resume.accepted_post.copy()
        window = (resume.window_accepts.copy() if resume.window_accepts is not None
                  else np.zeros(d, dtype=int))
    else:
        warmup = config.warmup if config.warmup is not None else int(round(config.warmup_frac * steps))
        scales = np.broadcast_to(np.asarray(config.scales, dtype=float), (d,)).copy()
        rng = np.random.default_rng(seed)
        start = 0
        history = [list(map(float, scales))]
        accepted = np.zeros(d, dtype=int)
        accepted_post = np.zeros(d, dtype=int)
        window = np.zeros(d, dtype=int)
    if np.any(scales <= config.min_scale):
        raise ValueError("proposal scales must exceed the minimum scale")

    u = _to_u(x, transforms)
    lt = log_target(x)
    if not np.isfinite(lt):
        raise InitInfeasible("initial point has non-finite log posterior")
    cur = lt + _log_jac(u, transforms)

    samples = np.empty((steps, d))
    logpost = np.empty(steps)
    lo, hi = config.target
    for t in range(start, start + steps):
        z = rng.standard_normal(d)
        logu = np.log(rng.random(d))
        for j in range(d):
            uj = u[j]
            u[j] = uj + scales[j] * z[j]
            xp = _to_x(u, transforms)
            ltp = log_target(xp)
            prop = ltp + _log_jac(u, transforms) if np.isfinite(ltp) else -np.inf
            if logu[j] < prop - cur:
                cur, lt, x = prop, ltp, xp
                accepted[j] += 1
                window[j] += 1
                if t >= warmup:
                    accepted_post[j] += 1
            else:
                u[j] = uj
        samples[t - start] = x
        logpost[t - start] = lt
        if t < warmup and (t + 1) % config.adapt_every == 0:
            rate = window / config.adapt_every
            scales = np.where(rate < lo, scales * config.shrink,
                              np.where(rate > hi, scales * config.grow, scales))
            window = np.zeros(d, dtype=int)
            history.append(list(map(float, scales)))

    chain = PosteriorChain(samples, logpost, names, transforms, int(seed), warmup, scales,
                           history, accepted, accepted_post, rng.bit_generator.state, window)
    if resume is not None:
        chain.samples = np.vstack([resume.samples, samples])
        chain.logpost = np.concatenate([resume.logpost, logpost])
    return chain


def posterior_mode(chain: PosteriorChain, log_target: Callable[[np.ndarray], float],
                   maxfev: int = 4000, tol: float = 1e-10, restarts: int = 5) -> np.ndarray:
    """Local maximiser of ``log_target`` started at the best chain sample."""
    if chain.n_steps == 0:
        raise EmptyChain("cannot locate a mode from an empty chain")
    x0 = chain.samples[int(np.argmax(chain.logpost))]
    tr = chain.transforms
    u0 = _to_u(x0, tr)
    f0 = log_target(x0)

    def obj(u):
        v = log_target(_to_x(u, tr))
        return -v if np.isfinite(v) else np.inf

    # restart until a pass stops improving; a single simplex run can stall early
    u, best = u0, obj(u0)
    for _ in range(restarts):
        res = minimize(obj, u, method="Nelder-Mead",
                       options={"maxfev": maxfev, "xatol": tol, "fatol": tol, "adaptive": True})
        gain = best - res.fun if np.isfinite(best) else np.inf
        if res.fun <= best:
            u, best = res.x, res.fun
        if gain <= tol:
            break
    res.x, res.fun = u, best
    if not np.isfinite(res.fun):
        raise OptimizerDiverged("log posterior non-finite around the best sample")
    if np.isfinite(f0) and -res.fun < f0:
        return x0.copy()
    return _to_x(res.x, tr)


def calibration_transforms(q: int) -> list[str]:
    return ["identity"] * q + ["log"] * 4


def with_theta(psi: CalibrationState, theta) -> CalibrationState:
    return replace(psi, theta_star=tuple(np.atleast_1d(theta)))
