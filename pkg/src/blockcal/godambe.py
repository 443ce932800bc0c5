"""Limit-model composite likelihood, analytic scores, Godambe matrices and chain adjustments.

In the limit of a dense design the emulator collapses to a measurement-error
model: the observations are Gaussian around the model output ``Y*`` at
``theta*`` with covariance ``v0 * Sigma_s + Sigma_d``, where ``v0`` is the
emulator's residual variance in parameter space (``zeta_theta`` in the
limit; the kriging variance at the mode for a finite design).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .calibrator import CalibrationProblem, CalibrationState
from .covmodel import (
    LOG_2PI,
    chol_logdet,
    chol_quad,
    cholesky,
    theta_cross_cov,
)
from .emulator import EmulatorFit
from .errors import DimensionMismatch, NonDifferentiablePoint, NotPositiveDefinite

EIG_FLOOR = 1e-12


# --------------------------------------------------------------------------
# emulator derivatives
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DerivativeBundle:
    d_cross: np.ndarray   # q x p, derivative of Sigma_{theta* theta} per theta*_j
    d_weights: np.ndarray  # q x p, derivative of the kriging weights
    d_Y: np.ndarray       # n x q, derivative of the emulated output Y*
    d_Ybar: np.ndarray    # M x q, derivative of its block means


def emulator_derivatives(fit: EmulatorFit, Y, thetas, theta_star, geom=None) -> DerivativeBundle:
    """Derivatives of the emulator mean ``Y Sigma_theta^{-1} Sigma_{theta theta*}`` in theta*."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    ts = np.atleast_1d(np.asarray(theta_star, dtype=float))
    xt = fit.xi_theta
    diff = ts[None, :] - thetas
    if np.any(np.abs(diff) < 1e-12):
        raise NonDifferentiablePoint("theta* coincides with a design coordinate")
    S, cross, _ = theta_cross_cov(ts, thetas, xt)
    phi = np.asarray(xt.phi_theta)
    # the kernel carries kappa_theta, so its derivative does too
    d_cross = -(phi[:, None] * np.sign(diff).T) * cross[None, :]
    L = cholesky(S, "Sigma_theta")
    d_w = cho_solve((L, True), d_cross.T).T
    d_Y = np.asarray(Y, dtype=float) @ d_w.T
    d_Ybar = geom.block_means(d_Y) if geom is not None else None
    return DerivativeBundle(d_cross, d_w, d_Y, d_Ybar)


def emulator_mean_fn(fit: EmulatorFit, Y, thetas) -> Callable:
    """``theta -> (Y*, dY*/dtheta)`` using the emulator's predictive mean."""
    from .emulator import kriging_weights

    def f(theta):
        w, _ = kriging_weights(theta, thetas, fit.xi_theta)
        d = emulator_derivatives(fit, Y, thetas, theta)
        return Y @ w, d.d_Y

    return f


# --------------------------------------------------------------------------
# limit model
# --------------------------------------------------------------------------

XI_NAMES = ("kappa_s", "zeta_d", "kappa_d", "phi_d")


class LimitModel:
    """Block composite likelihood of the measurement-error model.

    ``mean_fn(theta) -> (Y*, dY*)`` supplies the model output at theta and its
    n x q Jacobian. ``v0`` multiplies the emulator spatial covariance.
    """

    def __init__(self, problem: CalibrationProblem, mean_fn: Callable, v0: float):
        self.problem = problem
        self.geom = problem.geom
        self.mean_fn = mean_fn
        self.v0 = float(v0)
        self.Z = problem.Z
        self.q = problem.q

    @classmethod
    def measurement_error(cls, Z, geom, xi_s, mean_fn: Callable, v0: float,
                          mode: str = "exact", q: int = 1) -> "LimitModel":
        """Limit model without an ensemble: ``mean_fn`` gives Y* and its Jacobian directly."""
        from .covmodel import ThetaCovParams

        # the problem only supplies block covariances here; the ensemble is a placeholder
        fit = EmulatorFit(xi_s, ThetaCovParams(1.0, 1.0, (1.0,) * q))
        thetas = np.array([np.zeros(q), np.ones(q)])
        prob = CalibrationProblem(Z, np.zeros((geom.n, 2)), thetas, geom, fit, mode)
        return cls(prob, mean_fn, v0)

    def observe(self, Z) -> "LimitModel":
        """Same model with a different observation vector (covariance caches shared)."""
        Z = np.asarray(Z, dtype=float).ravel()
        if Z.size != self.geom.n:
            raise DimensionMismatch(f"Z has length {Z.size}, grid has n={self.geom.n}")
        other = object.__new__(LimitModel)
        other.__dict__.update(self.__dict__)
        other.Z = Z
        return other

    @classmethod
    def from_emulator(cls, problem: CalibrationProblem, v0: float | None = None) -> "LimitModel":
        fit = problem.fit
        v0 = fit.xi_theta.zeta_theta if v0 is None else v0
        return cls(problem, emulator_mean_fn(fit, problem.Y, problem.thetas), v0)

    # -- pieces ----------------------------------------------------------
    def bundle(self, psi: CalibrationState):
        """Per-block (A_i, a_i, C_i) and the block-mean covariance S."""
        _, _, S, blocks = self.problem.moments(psi, emulator_variance=self.v0)
        out = []
        for i, (c, B) in enumerate(blocks):
            ni = self.geom.sizes[i]
            sii = S[i, i]
            a = c / sii
            A = np.hstack([np.eye(ni - 1), np.zeros((ni - 1, 1))]) - np.outer(a, np.full(ni, 1.0 / ni))
            C = B - np.outer(c, c) / sii
            out.append((A, a, C, c, B))
        return S, out

    def loglik(self, psi: CalibrationState, Ystar=None) -> float:
        """Rewritten form using ``A_i (Z_[i] - Y*_[i])``."""
        if Ystar is None:
            Ystar, _ = self.mean_fn(psi.theta_star)
        S, blocks = self.bundle(psi)
        e = self.Z - Ystar
        r = self.geom.block_means(e)
        LS = cholesky(S, "Sigma_Zbar")
        val = -0.5 * (self.geom.M * LOG_2PI + chol_logdet(LS) + chol_quad(LS, r))
        for i, (A, a, C, c, B) in enumerate(blocks):
            ni = self.geom.sizes[i]
            if ni < 2:
                continue
            LC = cholesky(C, f"conditional covariance of block {i}")
            u = A @ self.geom.block_rows(e, i)
            val += -0.5 * ((ni - 1) * LOG_2PI + chol_logdet(LC) + chol_quad(LC, u))
        return float(val)

    # -- scores ----------------------------------------------------------
    def linear_forms(self, psi: CalibrationState, dY=None) -> np.ndarray:
        """n x q matrix L with ``score_theta = L^T (Z - Y*)``."""
        if dY is None:
            _, dY = self.mean_fn(psi.theta_star)
        S, blocks = self.bundle(psi)
        geom = self.geom
        W = geom.averaging_matrix
        dYbar = geom.block_means(dY)
        LS = cholesky(S, "Sigma_Zbar")
        Lmat = W.T @ cho_solve((LS, True), dYbar)
        for i, (A, a, C, c, B) in enumerate(blocks):
            if geom.sizes[i] < 2:
                continue
            LC = cholesky(C, f"conditional covariance of block {i}")
            Ad = A @ geom.block_rows(dY, i)
            Lmat[list(geom.blocking.blocks[i])] += A.T @ cho_solve((LC, True), Ad)
        return Lmat

    def score_theta(self, psi: CalibrationState) -> np.ndarray:
        Ystar, dY = self.mean_fn(psi.theta_star)
        return self.linear_forms(psi, dY).T @ (self.Z - Ystar)

    def _xi_derivs(self, psi: CalibrationState):
        """For each xi_k: dS (M x M) and per-block (dc, dB)."""
        pr = self.problem
        geom = self.geom
        phi = psi.phi_d
        v0 = self.v0
        om, lam = pr._disc_unit(float(phi))
        dom_phi = geom.block_average(lambda D, same: -D * np.exp(-phi * D), pr.mode)
        N = pr._nugget_mean
        dS = [v0 * pr.H_unit, psi.kappa_d * N, psi.zeta_d * N + om, psi.kappa_d * dom_phi]
        dblocks = []
        for i in range(geom.M):
            ni = geom.sizes[i]
            D = geom.block_distances[i]
            E, e = lam[i]
            nu = np.full(ni - 1, 1.0 / ni)
            I = np.eye(ni - 1)
            DE = -D * np.exp(-phi * D)
            dblocks.append([
                (v0 * pr.gam_unit[i], v0 * pr.Gam_unit[i]),
                (psi.kappa_d * nu, psi.kappa_d * I),
                (psi.zeta_d * nu + e, psi.zeta_d * I + E),
                (psi.kappa_d * DE[:-1, :].mean(axis=1), psi.kappa_d * DE[:-1, :-1]),
            ])
        return dS, dblocks

    def score_xi(self, psi: CalibrationState) -> np.ndarray:
        """Gradient of the limit log composite likelihood in (kappa_s, zeta_d, kappa_d, phi_d)."""
        Ystar, _ = self.mean_fn(psi.theta_star)
        S, blocks = self.bundle(psi)
        dS, dblocks = self._xi_derivs(psi)
        geom = self.geom
        e = self.Z - Ystar
        r = geom.block_means(e)
        LS = cholesky(S, "Sigma_Zbar")
        Sinv = cho_solve((LS, True), np.eye(geom.M))
        Sr = Sinv @ r
        g = np.array([0.5 * Sr @ dSk @ Sr - 0.5 * np.sum(Sinv * dSk) for dSk in dS])
        for i, (A, a, C, c, B) in enumerate(blocks):
            ni = geom.sizes[i]
            if ni < 2:
                continue
            sii = S[i, i]
            LC = cholesky(C, f"conditional covariance of block {i}")
            Cinv = cho_solve((LC, True), np.eye(ni - 1))
            ei = geom.block_rows(e, i)
            u = A @ ei
            Cu = Cinv @ u
            ebar = ei.mean()
            for k, (dc, dB) in enumerate(dblocks[i]):
                ds = dS[k][i, i]
                dC = dB - (np.outer(dc, c) + np.outer(c, dc)) / sii + np.outer(c, c) * ds / sii ** 2
                da = dc / sii - c * ds / sii ** 2
                # dA = -da 1^T / n_i, so d(A e) = -da * mean(e)
                g[k] += 0.5 * Cu @ dC @ Cu + ebar * (da @ Cu) - 0.5 * np.sum(Cinv * dC)
        return g

    # -- Godambe pieces --------------------------------------------------
    def true_covariance(self, psi: CalibrationState) -> np.ndarray:
        """Dense ``v0 * Sigma_s + Sigma_d`` implied by the model at psi."""
        pr = self.problem
        grid = self.geom.grid
        D = grid.distances(radius=self.geom.radius)
        xs = pr.fit.xi_s
        eye = np.eye(grid.n)
        Ks = psi.kappa_s * (xs.zeta_s * eye + np.exp(-xs.phi_s * D))
        Kd = psi.kappa_d * (psi.zeta_d * eye + np.exp(-psi.phi_d * D))
        return self.v0 * Ks + Kd

    def P_star(self, psi: CalibrationState, sigma_true: np.ndarray | None = None) -> np.ndarray:
        Lmat = self.linear_forms(psi)
        St = self.true_covariance(psi) if sigma_true is None else sigma_true
        P = Lmat.T @ St @ Lmat
        return 0.5 * (P + P.T)

    def Q_star(self, psi: CalibrationState) -> np.ndarray:
        _, dY = self.mean_fn(psi.theta_star)
        S, blocks = self.bundle(psi)
        geom = self.geom
        dYbar = geom.block_means(dY)
        LS = cholesky(S, "Sigma_Zbar")
        X = solve_triangular(LS, dYbar, lower=True)
        Q = X.T @ X
        for i, (A, a, C, c, B) in enumerate(blocks):
            if geom.sizes[i] < 2:
                continue
            LC = cholesky(C, f"conditional covariance of block {i}")
            X = solve_triangular(LC, A @ geom.block_rows(dY, i), lower=True)
            Q += X.T @ X
        return 0.5 * (Q + Q.T)


def simulate_scores(model: LimitModel, psi: CalibrationState, reps: int, seed: int):
    """Scores at psi for ``reps`` draws of Z from the model's own Gaussian law."""
    Ystar, _ = model.mean_fn(psi.theta_star)
    L = cholesky(model.true_covariance(psi), "true covariance")
    rng = np.random.default_rng(seed)
    st, sx = [], []
    for _ in range(reps):
        m = model.observe(Ystar + L @ rng.standard_normal(model.geom.n))
        st.append(m.score_theta(psi))
        sx.append(m.score_xi(psi))
    return np.array(st), np.array(sx)


def limit_cloglik(psi: CalibrationState, model: LimitModel) -> float:
    return model.loglik(psi)


def score_theta(psi: CalibrationState, model: LimitModel) -> np.ndarray:
    return model.score_theta(psi)


def score_xi(psi: CalibrationState, model: LimitModel) -> np.ndarray:
    return model.score_xi(psi)


def p_star_fourterm(model: LimitModel, psi: CalibrationState, sigma_true=None) -> np.ndarray:
    """P* assembled from the block-mean/within-block covariance groups one by one.

    Reference form of ``LimitModel.P_star`` that sums the four groups
    (mean-mean, mean-block, block-mean, block-block) explicitly.
    """
    _, dY = model.mean_fn(psi.theta_star)
    S, blocks = model.bundle(psi)
    geom = model.geom
    St = model.true_covariance(psi) if sigma_true is None else sigma_true
    W = geom.averaging_matrix
    LS = cholesky(S, "Sigma_Zbar")
    Bbar = cho_solve((LS, True), geom.block_means(dY)).T  # q x M
    Bi = []
    for i, (A, a, C, c, B) in enumerate(blocks):
        LC = cholesky(C, "C")
        Bi.append((A.T @ cho_solve((LC, True), A @ geom.block_rows(dY, i))).T)  # q x n_i
    idx = [list(b) for b in geom.blocking.blocks]
    SZbar = W @ St @ W.T
    P = Bbar @ SZbar @ Bbar.T
    for i in range(geom.M):
        cross = W @ St[:, idx[i]]  # M x n_i, Cov(Zbar, Z_[i])
        t = Bbar @ cross @ Bi[i].T
        P += t + t.T
        for j in range(geom.M):
            P += Bi[i] @ St[np.ix_(idx[i], idx[j])] @ Bi[j].T
    return 0.5 * (P + P.T)


# --------------------------------------------------------------------------
# adjustments
# --------------------------------------------------------------------------

def sqrtm_spd(A: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Symmetric square root (or inverse square root) with eigenvalue floor."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    if np.any(w <= 0):
        raise NotPositiveDefinite("matrix square root needs a positive definite input")
    w = np.maximum(w, EIG_FLOOR)
    r = w ** (-0.5 if inverse else 0.5)
    return (V * r) @ V.T


def godambe_information(P, Q) -> np.ndarray:
    P, Q = np.atleast_2d(P), np.atleast_2d(Q)
    G = Q @ np.linalg.solve(P, Q)
    return 0.5 * (G + G.T)


def open_faced_matrix(P, Q) -> np.ndarray:
    """``C = Q^{-1} P^{1/2} Q^{1/2}``; satisfies ``C Q^{-1} C^T = Q^{-1} P Q^{-1}``."""
    P, Q = np.atleast_2d(P), np.atleast_2d(Q)
    return np.linalg.solve(Q, sqrtm_spd(P) @ sqrtm_spd(Q))


def curvature_matrix(P, Q) -> np.ndarray:
    """``D = Q^{-1/2} (Q P^{-1} Q)^{1/2}``; satisfies ``D^T Q D = Q P^{-1} Q``."""
    return sqrtm_spd(Q, inverse=True) @ sqrtm_spd(godambe_information(P, Q))


@dataclass
class GodambeMatrices:
    P_star: np.ndarray
    Q_star: np.ndarray
    G: np.ndarray
    C: np.ndarray
    D: np.ndarray
    source: str = "analytic"

    @classmethod
    def from_PQ(cls, P, Q, source: str = "analytic") -> "GodambeMatrices":
        P = np.atleast_2d(np.asarray(P, dtype=float))
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if P.shape != Q.shape or P.shape[0] != P.shape[1]:
            raise DimensionMismatch("P* and Q* must be square and of equal size")
        return cls(P, Q, godambe_information(P, Q), open_faced_matrix(P, Q), curvature_matrix(P, Q), source)

    @property
    def asymptotic_cov(self) -> np.ndarray:
        return np.linalg.inv(self.G)

    def to_dict(self) -> dict:
        def enc(A):
            return {"shape": list(A.shape), "data": [float(x) for x in A.ravel()]}

        return {"P_star": enc(self.P_star), "Q_star": enc(self.Q_star), "G": enc(self.G),
                "C": enc(self.C), "D": enc(self.D), "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "GodambeMatrices":
        def dec(x):
            return np.asarray(x["data"], dtype=float).reshape(x["shape"])

        return cls(dec(d["P_star"]), dec(d["Q_star"]), dec(d["G"]), dec(d["C"]), dec(d["D"]),
                   d.get("source", "analytic"))


def compute_godambe(model: LimitModel, psi_hat: CalibrationState, q_source: str = "analytic",
                    chain_theta: np.ndarray | None = None) -> GodambeMatrices:
    """P*, Q* at the mode; Q* from the chain's curvature when ``q_source="chain"``."""
    P = model.P_star(psi_hat)
    if q_source == "analytic":
        Q = model.Q_star(psi_hat)
    elif q_source == "chain":
        if chain_theta is None:
            raise ValueError("chain-based Q* needs theta samples")
        cov = np.atleast_2d(np.cov(np.asarray(chain_theta).T))
        Q = np.linalg.inv(cov)
    else:
        raise ValueError(f"q_source must be 'analytic' or 'chain', got {q_source!r}")
    return GodambeMatrices.from_PQ(P, Q, q_source)


def open_faced_adjust(samples, P, Q, mode) -> np.ndarray:
    """Map each sample row to ``mode + C (x - mode)``."""
    X = np.atleast_2d(np.asarray(samples, dtype=float).T).T
    m = np.atleast_1d(np.asarray(mode, dtype=float))
    C = open_faced_matrix(P, Q)
    return m + (X - m) @ C.T


def curvature_adjust(points, P, Q, mode) -> np.ndarray:
    """Evaluation points ``mode + D (x - mode)`` for the curvature-adjusted likelihood."""
    X = np.atleast_2d(np.asarray(points, dtype=float).T).T
    m = np.atleast_1d(np.asarray(mode, dtype=float))
    D = curvature_matrix(P, Q)
    return m + (X - m) @ D.T


def adjust_chain_theta(samples: np.ndarray, q: int, mats: GodambeMatrices, mode_theta) -> np.ndarray:
    """Open-faced adjustment of the theta* columns of a full psi chain."""
    out = np.array(samples, dtype=float, copy=True)
    out[:, :q] = open_faced_adjust(out[:, :q], mats.P_star, mats.Q_star, mode_theta)
    return out

