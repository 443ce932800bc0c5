"""Emulation stage: block composite likelihood of model runs and its MLE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .covmodel import (
    LOG_2PI,
    BlockGeometry,
    SpatialCovParams,
    ThetaCovParams,
    block_internal_cov,
    block_mean_cov,
    chol_logdet,
    cholesky,
    theta_cross_cov,
    theta_kernel_matrix,
)
from .errors import DimensionMismatch, NotPositiveDefinite, OptimizerDiverged
from .geo import Blocking


@dataclass(frozen=True)
class ParameterDesign:
    """p design settings (rows of ``thetas``, each a q-vector)."""

    thetas: np.ndarray
    ids: tuple[str, ...] = ()
    bounds: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        if t.shape[0] == 1 and np.ndim(self.thetas) == 1:
            t = t.T
        object.__setattr__(self, "thetas", t)
        if not self.ids:
            object.__setattr__(self, "ids", tuple(f"run{k}" for k in range(t.shape[0])))
        if not self.bounds:
            object.__setattr__(self, "bounds", tuple(zip(t.min(axis=0), t.max(axis=0))))
        if len(self.ids) != t.shape[0]:
            raise DimensionMismatch("one id per design point required")
        if len({tuple(r) for r in t}) != t.shape[0]:
            raise ValueError("design settings must be distinct")

    @property
    def p(self) -> int:
        return self.thetas.shape[0]

    @property
    def q(self) -> int:
        return self.thetas.shape[1]

    def drop(self, k: int) -> "ParameterDesign":
        keep = [j for j in range(self.p) if j != k]
        return ParameterDesign(self.thetas[keep], tuple(self.ids[j] for j in keep), self.bounds)


@dataclass(frozen=True)
class ModelOutputEnsemble:
    """n x p matrix of model runs; column j is the run at design point j."""

    Y: np.ndarray

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2:
            raise DimensionMismatch("ensemble must be an n x p matrix")
        if not np.all(np.isfinite(Y)):
            raise ValueError("ensemble contains non-finite values")
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]


@dataclass
class EmulatorFit:
    xi_s: SpatialCovParams
    xi_theta: ThetaCovParams
    blocking: Blocking | None = None
    converged: bool = True
    loglik: float = float("nan")
    n_evals: int = 0
    mode: str = "exact"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "xi_s": self.xi_s.to_dict(),
            "xi_theta": self.xi_theta.to_dict(),
            "converged": bool(self.converged),
            "loglik": float(self.loglik),
            "n_evals": int(self.n_evals),
            "mode": self.mode,
            "blocking": None if self.blocking is None else self.blocking.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmulatorFit":
        return cls(
            xi_s=SpatialCovParams.from_dict(d["xi_s"]),
            xi_theta=ThetaCovParams.from_dict(d["xi_theta"]),
            blocking=None if d.get("blocking") is None else Blocking.from_dict(d["blocking"]),
            converged=bool(d.get("converged", True)),
            loglik=float(d.get("loglik", "nan")),
            n_evals=int(d.get("n_evals", 0)),
            mode=d.get("mode", "exact"),
        )


def _kron_quad(LA: np.ndarray, LB: np.ndarray, R: np.ndarray) -> float:
    """Quadratic form of row-stacked ``R`` under ``A (x) B`` from Cholesky factors."""
    X = solve_triangular(LA, R, lower=True)
    W = solve_triangular(LB, X.T, lower=True)
    return float(np.sum(W * W))


def emulation_terms(Y, thetas, geom: BlockGeometry, xi_s: SpatialCovParams,
                    xi_theta: ThetaCovParams, mode: str = "exact") -> tuple[float, list[float]]:
    """Block-mean term and per-block conditional terms of the emulation log composite likelihood."""
    Y = np.asarray(Y, dtype=float)
    n, p = Y.shape
    if n != geom.n or p != np.atleast_2d(thetas).shape[0]:
        raise DimensionMismatch(f"ensemble {Y.shape} does not match grid n={geom.n} / design")
    Lth = cholesky(theta_kernel_matrix(thetas, thetas, xi_theta), "Sigma_theta")
    ld_th = chol_logdet(Lth)
    H = block_mean_cov(geom, xi_s, mode)
    LH = cholesky(H, "H")
    Ybar = geom.block_means(Y)
    M = geom.M
    mean_term = -0.5 * (M * p * LOG_2PI + p * chol_logdet(LH) + M * ld_th + _kron_quad(LH, Lth, Ybar))

    block_terms = []
    for i in range(M):
        ni = geom.sizes[i]
        if ni < 2:
            block_terms.append(0.0)
            continue
        Gam, gam = block_internal_cov(geom, i, xi_s)
        hii = H[i, i]
        C = Gam - np.outer(gam, gam) / hii
        LC = cholesky(C, f"conditional covariance of block {i}")
        R = geom.block_rows(Y, i)[:-1] - np.outer(gam / hii, Ybar[i])
        d = ni - 1
        block_terms.append(-0.5 * (d * p * LOG_2PI + p * chol_logdet(LC) + d * ld_th
                                   + _kron_quad(LC, Lth, R)))
    return mean_term, block_terms


def emulation_cloglik(ensemble, design, geom: BlockGeometry, xi_s: SpatialCovParams,
                      xi_theta: ThetaCovParams, mode: str = "exact") -> float:
    """Emulation-stage log composite likelihood.

    Block means follow ``N(0, H (x) Sigma_theta)``; each block's non-omitted
    outputs, given its own block mean, are Gaussian with mean
    ``(gamma_i / H_ii (x) I_p) Ybar_i`` and covariance
    ``(Gamma_i - gamma_i gamma_i^T / H_ii) (x) Sigma_theta``.
    The normalising constants are included, so this is a proper log density.
    """
    Y = ensemble.Y if isinstance(ensemble, ModelOutputEnsemble) else ensemble
    thetas = design.thetas if isinstance(design, ParameterDesign) else design
    mean_term, block_terms = emulation_terms(Y, thetas, geom, xi_s, xi_theta, mode)
    return mean_term + float(np.sum(block_terms))


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def pack_emulator_params(xi_s: SpatialCovParams, xi_theta: ThetaCovParams) -> np.ndarray:
    return np.log([xi_s.zeta_s, xi_s.kappa_s, xi_s.phi_s, xi_theta.zeta_theta, *xi_theta.phi_theta])


def unpack_emulator_params(x, kappa_theta: float = 1.0) -> tuple[SpatialCovParams, ThetaCovParams]:
    e = np.exp(np.asarray(x, dtype=float))
    return (SpatialCovParams(e[0], e[1], e[2]),
            ThetaCovParams(e[3], kappa_theta, tuple(e[4:])))


def default_init(ensemble: ModelOutputEnsemble, design: ParameterDesign, geom: BlockGeometry):
    """Data-driven starting point: inverse median distances, sill from data variance."""
    iu = np.triu_indices(geom.n, 1)
    medd = float(np.median(geom.grid.distances()[iu])) if geom.n > 1 else 1.0
    t = design.thetas
    phi_t = []
    for k in range(design.q):
        dk = np.abs(t[:, None, k] - t[None, :, k])[np.triu_indices(design.p, 1)]
        phi_t.append(1.0 / float(np.median(dk)) if dk.size else 1.0)
    var = float(np.var(ensemble.Y))
    if not var > 0:
        var = 1.0
    return SpatialCovParams(1e-2, var, 1.0 / max(medd, 1e-6)), ThetaCovParams(1e-2, 1.0, tuple(phi_t))


def fit_emulator(ensemble: ModelOutputEnsemble, design: ParameterDesign, geom: BlockGeometry,
                 init: tuple[SpatialCovParams, ThetaCovParams] | None = None,
                 maxfev: int = 2000, rtol: float = 1e-8, mode: str = "exact") -> EmulatorFit:
    """Maximum composite likelihood fit of (xi_s, xi_theta).

    Nelder-Mead on log parameters. ``kappa_theta`` stays at its initial value
    (1 by default): with a separable covariance only the product of the two
    sills is identified, so the spatial sill carries the scale.
    """
    if design.p < 2:
        raise ValueError("fitting needs at least two design points")
    if init is None:
        init = default_init(ensemble, design, geom)
    kappa_theta = init[1].kappa_theta
    x0 = pack_emulator_params(*init)

    def objective(x):
        if not np.all(np.abs(x) < 700):
            return np.inf
        try:
            xs, xt = unpack_emulator_params(x, kappa_theta)
            val = emulation_cloglik(ensemble, design, geom, xs, xt, mode)
        except (NotPositiveDefinite, ValueError):
            return np.inf
        return -val if np.isfinite(val) else np.inf

    f0 = objective(x0)
    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"maxfev": maxfev, "xatol": rtol, "fatol": rtol * max(1.0, abs(f0) if np.isfinite(f0) else 1.0),
                            "adaptive": True})
    if not np.isfinite(res.fun):
        raise OptimizerDiverged("emulation objective was non-finite at every probe")
    x = res.x
    if np.isfinite(f0) and f0 < res.fun:
        x = x0
    xs, xt = unpack_emulator_params(x, kappa_theta)
    return EmulatorFit(xs, xt, geom.blocking, bool(res.success), -float(min(res.fun, f0)),
                       int(res.nfev), mode)


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------

def kriging_weights(theta, thetas, xi_theta: ThetaCovParams):
    """Weights ``Sigma_{t theta} Sigma_theta^{-1}`` and predictive variance in parameter space."""
    S, cross, prior_var = theta_cross_cov(theta, thetas, xi_theta)
    L = cholesky(S, "Sigma_theta")
    w = solve_triangular(L.T, solve_triangular(L, cross, lower=True), lower=False)
    v = prior_var - float(cross @ w)
    return w, max(v, 0.0)


def emulator_predict(fit: EmulatorFit, ensemble, design, theta):
    """Per-location emulator mean and pointwise variance at ``theta``."""
    Y = ensemble.Y if isinstance(ensemble, ModelOutputEnsemble) else np.asarray(ensemble)
    thetas = design.thetas if isinstance(design, ParameterDesign) else design
    w, v = kriging_weights(theta, thetas, fit.xi_theta)
    marginal = fit.xi_s.kappa_s * (1.0 + fit.xi_s.zeta_s)
    return Y @ w, np.full(Y.shape[0], v * marginal)


# --------------------------------------------------------------------------
# cost model
# --------------------------------------------------------------------------

def _pair_sum(sizes) -> float:
    s = np.asarray(sizes, dtype=float)
    return float((s.sum() ** 2 + np.sum(s * s)) / 2.0)


def flop_cost(n: int, block_sizes, subsample_sizes=None) -> dict:
    """Flop counts of a full versus a blocked likelihood evaluation.

    ``H_exact`` and ``H_subsampled`` count the pairwise sums over ``i <= j``
    needed for the block-mean covariance.
    """
    sizes = np.asarray(block_sizes, dtype=float)
    if sizes.sum() != n:
        raise ValueError("block sizes must sum to n")
    M = sizes.size
    h_exact = _pair_sum(sizes)
    out = {
        "full": n ** 3 / 3.0,
        "blocked": h_exact + M ** 3 / 3.0 + float(np.sum((sizes - 1) ** 3)) / 3.0,
        "H_exact": h_exact,
    }
    if subsample_sizes is not None:
        out["H_subsampled"] = _pair_sum(subsample_sizes)
    return out
