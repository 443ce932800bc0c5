"""Exponential covariance functions and block covariance algebra.

Spatial kernels follow ``K(s, s') = kappa * (zeta * 1(s = s') + exp(-phi * g(s, s')))``
with the nugget inside the sill and ``g`` the great-circle distance in km.
The parameter-space kernel keeps the nugget outside:
``K(t, t') = zeta * 1(t = t') + kappa * exp(-sum_i phi_i |t_i - t'_i|)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite
from .geo import EARTH_RADIUS_KM, Blocking, Location, SpatialGrid, geodesic_distance

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_positive(obj):
    for k, v in asdict(obj).items():
        if np.any(np.asarray(v, dtype=float) <= 0) or not np.all(np.isfinite(v)):
            raise ValueError(f"{type(obj).__name__}.{k} must be finite and > 0, got {v}")


@dataclass(frozen=True)
class ThetaCovParams:
    zeta_theta: float
    kappa_theta: float
    phi_theta: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "phi_theta", tuple(float(x) for x in np.atleast_1d(self.phi_theta)))
        _check_positive(self)

    @property
    def q(self) -> int:
        return len(self.phi_theta)

    def to_dict(self) -> dict:
        return {"zeta_theta": self.zeta_theta, "kappa_theta": self.kappa_theta,
                "phi_theta": list(self.phi_theta)}

    @classmethod
    def from_dict(cls, d: dict) -> "ThetaCovParams":
        return cls(float(d["zeta_theta"]), float(d["kappa_theta"]), tuple(d["phi_theta"]))


@dataclass(frozen=True)
class SpatialCovParams:
    zeta_s: float
    kappa_s: float
    phi_s: float

    def __post_init__(self):
        _check_positive(self)

    @property
    def triple(self) -> tuple[float, float, float]:
        return self.zeta_s, self.kappa_s, self.phi_s

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialCovParams":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class DiscrepancyCovParams:
    zeta_d: float
    kappa_d: float
    phi_d: float

    def __post_init__(self):
        _check_positive(self)

    @property
    def triple(self) -> tuple[float, float, float]:
        return self.zeta_d, self.kappa_d, self.phi_d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscrepancyCovParams":
        return cls(**{k: float(v) for k, v in d.items()})


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

def k_theta(theta, theta_prime, params: ThetaCovParams) -> float:
    a = np.atleast_1d(np.asarray(theta, dtype=float))
    b = np.atleast_1d(np.asarray(theta_prime, dtype=float))
    if a.shape != b.shape or a.size != params.q:
        raise DimensionMismatch(f"theta vectors of length {a.size}, {b.size}; params expect {params.q}")
    same = float(np.array_equal(a, b))
    return params.zeta_theta * same + params.kappa_theta * float(
        np.exp(-np.sum(np.asarray(params.phi_theta) * np.abs(a - b)))
    )


def theta_kernel_matrix(A, B, params: ThetaCovParams) -> np.ndarray:
    """``K_theta`` between the rows of ``A`` (a x q) and ``B`` (b x q)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != params.q or B.shape[1] != params.q:
        raise DimensionMismatch(f"expected q={params.q} columns, got {A.shape[1]} and {B.shape[1]}")
    diff = np.abs(A[:, None, :] - B[None, :, :])
    K = params.kappa_theta * np.exp(-np.tensordot(diff, np.asarray(params.phi_theta), axes=([2], [0])))
    same = np.all(diff == 0.0, axis=2)
    return K + params.zeta_theta * same


def spatial_kernel(D: np.ndarray, same: np.ndarray | float, params) -> np.ndarray:
    """Exponential kernel on a distance array; ``same`` marks identical locations."""
    zeta, kappa, phi = params.triple
    return kappa * (zeta * same + np.exp(-phi * D))


def k_spatial(a: Location, b: Location, kind: str, params, radius: float = EARTH_RADIUS_KM) -> float:
    if kind not in ("emulator", "discrepancy"):
        raise ValueError(f"kind must be 'emulator' or 'discrepancy', got {kind!r}")
    expected = SpatialCovParams if kind == "emulator" else DiscrepancyCovParams
    if not isinstance(params, expected):
        raise TypeError(f"{kind} kernel needs {expected.__name__}")
    same = float(a.index == b.index)
    return float(spatial_kernel(geodesic_distance(a, b, radius), same, params))


def kron_assemble(A, B) -> np.ndarray:
    """Dense Kronecker product. Only for reference computations."""
    return np.kron(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


# --------------------------------------------------------------------------
# factorisation
# --------------------------------------------------------------------------

def cholesky(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor, retrying with diagonal jitter 1e-10..1e-6 x mean diagonal."""
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(A)))
    if not np.isfinite(scale) or scale <= 0:
        raise NotPositiveDefinite(f"{what} has non-positive mean diagonal")
    eye = np.eye(A.shape[0])
    for rel in (1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            return np.linalg.cholesky(A + rel * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(f"{what} is not positive definite after jitter escalation")


def chol_logdet(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def chol_quad(L: np.ndarray, r: np.ndarray) -> float:
    x = solve_triangular(L, r, lower=True)
    return float(np.sum(x * x))


def chol_inv(L: np.ndarray) -> np.ndarray:
    return cho_solve((L, True), np.eye(L.shape[0]))


# --------------------------------------------------------------------------
# block geometry
# --------------------------------------------------------------------------

class BlockGeometry:
    """Distances and averaging operators for one grid/blocking pair.

    Built once and reused across likelihood evaluations; everything cached
    here depends only on locations, never on covariance parameters.
    """

    def __init__(self, grid: SpatialGrid, blocking: Blocking, radius: float = EARTH_RADIUS_KM):
        blocking.check_partition(grid.n)
        self.grid = grid
        self.blocking = blocking
        self.radius = radius
        self.M = blocking.M
        self.sizes = blocking.sizes
        self.n = grid.n

    @cached_property
    def block_distances(self) -> list[np.ndarray]:
        return [self.grid.distances(b, None, self.radius) for b in self.blocking.blocks]

    def _member_sets(self, mode: str):
        if mode == "exact":
            return self.blocking.blocks
        if mode == "subsample":
            return self.blocking.subsample
        raise ValueError(f"mode must be 'exact' or 'subsample', got {mode!r}")

    @cached_property
    def _exact_op(self):
        return self._build_op("exact")

    @cached_property
    def _sub_op(self):
        return self._build_op("subsample")

    def mean_operator(self, mode: str):
        """(concatenated positions, segment starts, counts, distances) for block averages."""
        self._member_sets(mode)
        return self._exact_op if mode == "exact" else self._sub_op

    def _build_op(self, mode):
        sets = self._member_sets(mode)
        idx = np.concatenate([np.asarray(s, dtype=int) for s in sets])
        counts = np.array([len(s) for s in sets])
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        D = self.grid.distances(idx, None, self.radius)
        return idx, starts, counts, D

    @cached_property
    def averaging_matrix(self) -> np.ndarray:
        """M x n matrix mapping a grid vector to its exact block means."""
        W = np.zeros((self.M, self.n))
        for i, b in enumerate(self.blocking.blocks):
            W[i, list(b)] = 1.0 / len(b)
        return W

    def block_means(self, X: np.ndarray) -> np.ndarray:
        """Block means of the rows of ``X`` (n or n x p), averaging all n_i locations."""
        X = np.asarray(X, dtype=float)
        return np.stack([X[list(b)].mean(axis=0) for b in self.blocking.blocks])

    def block_rows(self, X: np.ndarray, i: int) -> np.ndarray:
        """Rows of ``X`` for block ``i`` in block order (omitted location last)."""
        return np.asarray(X)[list(self.blocking.blocks[i])]

    def block_average(self, K_fn, mode: str) -> np.ndarray:
        """M x M matrix of block-averaged values of ``K_fn(D, same)``.

        Off-diagonal entries average over the ``mode`` member sets. Diagonal
        entries always average over the whole block: they come from the same
        within-block kernel as Gamma_i and gamma_i, which keeps each block's
        conditional covariance a proper Schur complement.
        """
        idx, starts, counts, D = self.mean_operator(mode)
        K = K_fn(D, np.eye(idx.size))
        colsum = np.add.reduceat(K, starts, axis=1)
        S = np.add.reduceat(colsum, starts, axis=0)
        S = S / np.outer(counts, counts)
        S = 0.5 * (S + S.T)
        np.fill_diagonal(S, [K_fn(Db, np.eye(Db.shape[0])).mean() for Db in self.block_distances])
        return S


def block_mean_cov(geom: BlockGeometry, params, mode: str = "exact") -> np.ndarray:
    """Block-mean covariance (H for emulator parameters, Omega for discrepancy).

    ``exact`` averages the kernel over all location pairs of two blocks;
    ``subsample`` averages over the blocking's stored subsample only.
    """
    return geom.block_average(lambda D, same: spatial_kernel(D, same, params), mode)


def block_internal_cov(geom: BlockGeometry, i: int, params) -> tuple[np.ndarray, np.ndarray]:
    """Within-block covariance ``Gamma_i`` over non-omitted locations and the
    vector ``gamma_i`` of their mean covariance with all n_i block locations."""
    D = geom.block_distances[i]
    K = spatial_kernel(D, np.eye(D.shape[0]), params)
    return K[:-1, :-1], K[:-1, :].mean(axis=1)


def theta_cross_cov(theta_star, thetas, params: ThetaCovParams):
    """Return ``(Sigma_theta, Sigma_{theta* theta}, Sigma_{theta*})``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    ts = np.atleast_1d(np.asarray(theta_star, dtype=float))
    if ts.size != thetas.shape[1]:
        raise DimensionMismatch(f"theta* has length {ts.size}, design has q={thetas.shape[1]}")
    S = theta_kernel_matrix(thetas, thetas, params)
    cross = theta_kernel_matrix(ts[None, :], thetas, params)[0]
    return S, cross, params.zeta_theta + params.kappa_theta
