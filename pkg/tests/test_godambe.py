import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockcal.calibrator import CalibrationProblem, CalibrationState, with_theta
from blockcal.covmodel import BlockGeometry, DiscrepancyCovParams, SpatialCovParams, ThetaCovParams
from blockcal.emulator import EmulatorFit, kriging_weights
from blockcal.errors import NonDifferentiablePoint, NotPositiveDefinite
from blockcal.geo import Blocking, random_tessellation, single_block
from blockcal.godambe import (
    GodambeMatrices,
    LimitModel,
    adjust_chain_theta,
    compute_godambe,
    curvature_adjust,
    curvature_matrix,
    emulator_derivatives,
    limit_cloglik,
    open_faced_adjust,
    open_faced_matrix,
    p_star_fourterm,
    score_theta,
    score_xi,
    simulate_scores,
    sqrtm_spd,
)
from blockcal.oracle import full_loglik, spatial_cov_dense

from conftest import random_grid

XI_S = SpatialCovParams(0.01, 1.0, 1 / 2000)


def _smooth_mean(grid, q=1, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=grid.n)
    amp = 1 + 0.3 * rng.normal(size=(grid.n, q))

    def f(theta):
        t = np.atleast_1d(np.asarray(theta, dtype=float))
        return base + amp @ np.log(t), amp / t[None, :]

    return f


def _model(n=40, M=4, seed=0, q=1, v0=0.05, mode="exact"):
    grid = random_grid(n, seed)
    geom = BlockGeometry(grid, random_tessellation(grid, M, seed) if M > 1 else single_block(n))
    f = _smooth_mean(grid, q, seed)
    return LimitModel.measurement_error(np.zeros(n), geom, XI_S, f, v0, mode, q)


def _psi(rng, q=1):
    return CalibrationState(tuple(rng.uniform(1.0, 3.0, q)), rng.uniform(0.5, 2.0), rng.uniform(0.01, 0.2),
                            rng.uniform(0.2, 1.0), 1 / rng.uniform(500, 3000))


def _draw(model, psi, rng):
    Ystar, _ = model.mean_fn(psi.theta_star)
    return Ystar + np.linalg.cholesky(model.true_covariance(psi)) @ rng.standard_normal(model.geom.n)


def _fd(f, x, rel=1e-4):
    """Fourth-order central difference."""
    h = rel * max(abs(x), 1e-300)
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


# A_i ---------------------------------------------------------------------

def test_A_row_sums_and_pair_block():
    model = _model(n=30, M=3)
    psi = _psi(np.random.default_rng(0))
    _, blocks = model.bundle(psi)
    for A, a, *_ in blocks:
        assert np.allclose(A @ np.ones(A.shape[1]), 1 - a, atol=1e-14)
    grid = random_grid(4, 2)
    geom = BlockGeometry(grid, Blocking(((0, 1), (2, 3)), (1, 3), ((0, 1), (2, 3))))
    m = LimitModel.measurement_error(np.zeros(4), geom, XI_S, _smooth_mean(grid), 0.05)
    for A, a, *_ in m.bundle(psi)[1]:
        assert A.shape == (1, 2)
        assert np.allclose(A, [[1 - a[0] / 2, -a[0] / 2]], atol=1e-15)


def transcribed_limit(model, psi):
    """Block composite likelihood of N(Y*, v0 Sigma_s + Sigma_d) via conditional moments."""
    grid = model.geom.grid
    Ystar, _ = model.mean_fn(psi.theta_star)
    Sig = (model.v0 * spatial_cov_dense(grid, SpatialCovParams(XI_S.zeta_s, psi.kappa_s, XI_S.phi_s))
           + spatial_cov_dense(grid, DiscrepancyCovParams(psi.zeta_d, psi.kappa_d, psi.phi_d)))
    W = model.geom.averaging_matrix
    Z = model.Z
    out = full_loglik(W @ Z, W @ Ystar, W @ Sig @ W.T)
    for i, b in enumerate(model.geom.blocking.blocks):
        keep = list(b[:-1])
        s = W[i] @ Sig @ W[i]
        c = Sig[keep] @ W[i]
        mu = Ystar[keep] + c / s * (W[i] @ (Z - Ystar))
        out += full_loglik(Z[keep], mu, Sig[np.ix_(keep, keep)] - np.outer(c, c) / s)
    return out


def test_rewritten_form_matches_conditional_moments():
    rng = np.random.default_rng(1)
    base = _model(n=36, M=4)
    for _ in range(10):
        psi = _psi(rng)
        m = base.observe(_draw(base, psi, rng))
        assert limit_cloglik(psi, m) == pytest.approx(transcribed_limit(m, psi), abs=1e-9)


def test_limit_form_equals_calibration_likelihood_at_v0(small_fit):
    grid = random_grid(30, 4)
    geom = BlockGeometry(grid, random_tessellation(grid, 3, 4))
    rng = np.random.default_rng(4)
    prob = CalibrationProblem(rng.normal(size=30), rng.normal(size=(30, 3)),
                              np.array([[0.0], [1.0], [2.0]]), geom, small_fit)
    model = LimitModel.from_emulator(prob, v0=0.03)
    for _ in range(5):
        psi = CalibrationState((rng.uniform(0.1, 1.9),), 1.1, 0.05, 0.7, 1 / 1200)
        assert model.loglik(psi) == pytest.approx(prob.loglik(psi, emulator_variance=0.03), abs=1e-9)


# scores ------------------------------------------------------------------

def test_score_theta_matches_finite_differences():
    rng = np.random.default_rng(2)
    base = _model(n=40, M=4, q=2)
    for _ in range(10):
        psi = _psi(rng, q=2)
        m = base.observe(_draw(base, psi, rng))
        g = score_theta(psi, m)
        for j in range(2):
            def f(t, j=j):
                th = list(psi.theta_star)
                th[j] = t
                return m.loglik(with_theta(psi, th))
            assert g[j] == pytest.approx(_fd(f, psi.theta_star[j]), rel=1e-5, abs=1e-8 * np.abs(g).max())


def test_emulator_score_matches_calibration_likelihood_differences(small_fit):
    grid = random_grid(30, 6)
    geom = BlockGeometry(grid, random_tessellation(grid, 3, 6))
    rng = np.random.default_rng(6)
    thetas = np.array([[0.0], [0.7], [1.3], [2.0]])
    prob = CalibrationProblem(rng.normal(size=30), rng.normal(size=(30, 4)), thetas, geom, small_fit)
    v0 = small_fit.xi_theta.zeta_theta
    model = LimitModel.from_emulator(prob, v0)
    for t in rng.uniform(0.05, 1.95, 10):
        if np.min(np.abs(thetas[:, 0] - t)) < 1e-3:
            continue
        psi = CalibrationState((t,), 1.0, 0.05, 0.5, 1 / 1000)
        fd = _fd(lambda x: prob.loglik(with_theta(psi, x), emulator_variance=v0), t, rel=1e-6)
        assert model.score_theta(psi)[0] == pytest.approx(fd, rel=1e-5)


def test_score_xi_matches_finite_differences():
    rng = np.random.default_rng(3)
    base = _model(n=40, M=4, mode="subsample")
    names = ("kappa_s", "zeta_d", "kappa_d", "phi_d")
    for _ in range(10):
        psi = _psi(rng)
        m = base.observe(_draw(base, psi, rng))
        g = score_xi(psi, m)
        for k, name in enumerate(names):
            x0 = getattr(psi, name)
            fd = _fd(lambda x: m.loglik(CalibrationState(**{**psi.__dict__, name: x})), x0)
            # compare on the log scale so all coordinates share one yardstick
            assert x0 * g[k] == pytest.approx(x0 * fd, rel=1e-5, abs=1e-7)


def test_zero_residual_scores():
    model = _model()
    psi = _psi(np.random.default_rng(5))
    Ystar, _ = model.mean_fn(psi.theta_star)
    m = model.observe(Ystar)
    assert np.allclose(m.score_theta(psi), 0, atol=1e-10)
    # only log-determinant terms remain in the xi score
    g = m.score_xi(psi)
    for k, name in enumerate(("kappa_s", "zeta_d", "kappa_d", "phi_d")):
        x0 = getattr(psi, name)
        assert g[k] == pytest.approx(_fd(lambda x: m.loglik(CalibrationState(**{**psi.__dict__, name: x})), x0),
                                     rel=1e-5)


def test_parameter_absent_from_covariance_scores_zero():
    model = _model(v0=0.0)
    psi = _psi(np.random.default_rng(6))
    m = model.observe(_draw(model, psi, np.random.default_rng(7)))
    assert m.score_xi(psi)[0] == 0.0


def test_single_location_scalar_score():
    grid = random_grid(1, 0)
    geom = BlockGeometry(grid, single_block(1))
    f = lambda t: (np.array([2.0 * np.log(t[0])]), np.array([[2.0 / t[0]]]))
    m = LimitModel.measurement_error(np.array([1.3]), geom, XI_S, f, 0.1)
    psi = CalibrationState((1.5,), 2.0, 0.1, 0.5, 1 / 800)
    s = 0.1 * 2.0 * (1 + XI_S.zeta_s) + 0.5 * (1 + 0.1)
    assert m.score_theta(psi)[0] == pytest.approx((2 / 1.5) * (1.3 - 2 * np.log(1.5)) / s, rel=1e-12)
    assert m.Q_star(psi)[0, 0] == pytest.approx((2 / 1.5) ** 2 / s, rel=1e-12)


# emulator derivatives -----------------------------------------------------

def _fit(phi=0.8, kappa=1.7):
    return EmulatorFit(SpatialCovParams(0.1, 1.0, 1.0), ThetaCovParams(0.05, kappa, (phi,)))


def test_single_design_point_derivative_sign():
    fit = _fit()
    for ts, sign in ((1.6, -1.0), (0.4, 1.0)):
        d = emulator_derivatives(fit, np.ones((2, 1)), np.array([[1.0]]), [ts])
        assert d.d_cross[0, 0] == pytest.approx(sign * 0.8 * 1.7 * np.exp(-0.8 * abs(ts - 1.0)), rel=1e-12)
    with pytest.raises(NonDifferentiablePoint):
        emulator_derivatives(fit, np.ones((2, 1)), np.array([[1.0]]), [1.0 + 1e-13])


def test_derivatives_match_finite_differences():
    fit = EmulatorFit(SpatialCovParams(0.1, 1.0, 1.0), ThetaCovParams(0.05, 1.3, (0.8, 0.4)))
    rng = np.random.default_rng(0)
    thetas = rng.uniform(0, 3, (6, 2))
    Y = rng.normal(size=(10, 6))
    ts = np.array([1.37, 1.81])
    d = emulator_derivatives(fit, Y, thetas, ts)
    from blockcal.covmodel import theta_cross_cov
    for j in range(2):
        e = np.zeros(2)
        e[j] = 1e-6
        cross = lambda t: theta_cross_cov(t, thetas, fit.xi_theta)[1]
        assert np.allclose(d.d_cross[j], (cross(ts + e) - cross(ts - e)) / 2e-6, rtol=1e-6, atol=1e-9)
        mean = lambda t: Y @ kriging_weights(t, thetas, fit.xi_theta)[0]
        assert np.allclose(d.d_Y[:, j], (mean(ts + e) - mean(ts - e)) / 2e-6, rtol=1e-6, atol=1e-8)


def test_symmetric_pair_midpoint():
    fit = _fit()
    thetas = np.array([[0.0], [2.0]])
    d = emulator_derivatives(fit, np.array([[1.0, 1.0], [3.0, 3.0]]), thetas, [1.0])
    assert d.d_weights[0, 0] == pytest.approx(-d.d_weights[0, 1], abs=1e-14)
    assert np.allclose(d.d_Y, 0, atol=1e-14)


# P*, Q* -------------------------------------------------------------------

def test_p_star_forms_agree_and_relabel_invariance():
    model = _model(n=40, M=5, q=2)
    psi = _psi(np.random.default_rng(8), q=2)
    P, Q = model.P_star(psi), model.Q_star(psi)
    assert np.allclose(P, p_star_fourterm(model, psi), rtol=1e-10)
    assert np.allclose(P, P.T) and np.allclose(Q, Q.T)
    assert np.all(np.linalg.eigvalsh(Q) > 0)
    b = model.geom.blocking
    perm = [4, 2, 0, 3, 1]
    pb = Blocking(tuple(b.blocks[i] for i in perm), tuple(b.omitted[i] for i in perm),
                  tuple(b.subsample[i] for i in perm))
    other = LimitModel.measurement_error(model.Z, BlockGeometry(model.geom.grid, pb), XI_S,
                                         model.mean_fn, model.v0, q=2)
    assert np.allclose(other.P_star(psi), P, rtol=1e-10)
    assert np.allclose(other.Q_star(psi), Q, rtol=1e-10)


def test_single_block_p_equals_q():
    # one block is a full likelihood, so the information identity holds exactly
    model = _model(n=25, M=1)
    psi = _psi(np.random.default_rng(9))
    assert np.allclose(model.P_star(psi), model.Q_star(psi), rtol=1e-8)


@pytest.mark.slow
def test_monte_carlo_score_covariance_hessian_and_independence():
    model = _model(n=40, M=4, q=2, seed=3)
    psi = CalibrationState((1.5, 2.2), 1.0, 0.05, 0.5, 1 / 1200)
    reps = 2000
    st_, sx = simulate_scores(model, psi, reps, seed=11)
    P, Q = model.P_star(psi), model.Q_star(psi)
    emp = np.cov(st_.T)
    assert np.linalg.norm(emp - P) / np.linalg.norm(P) < 0.10
    # scores have mean zero under the model
    assert np.all(np.abs(st_.mean(axis=0)) < 3 * st_.std(axis=0) / np.sqrt(reps))
    # linear and quadratic forms of the same Gaussian are uncorrelated
    for a in range(st_.shape[1]):
        for b in range(sx.shape[1]):
            prod = (st_[:, a] - st_[:, a].mean()) * (sx[:, b] - sx[:, b].mean())
            assert abs(prod.mean()) <= 3 * prod.std() / np.sqrt(reps)
    # average Hessian over 200 replicates from this score's finite differences
    rng = np.random.default_rng(12)
    H = np.zeros((2, 2))
    k = 200
    for _ in range(k):
        m = model.observe(_draw(model, psi, rng))
        for j in range(2):
            e = np.zeros(2)
            e[j] = 1e-5
            up = m.score_theta(with_theta(psi, np.add(psi.theta_star, e)))
            dn = m.score_theta(with_theta(psi, np.subtract(psi.theta_star, e)))
            H[:, j] += (up - dn) / 2e-5 / k
    assert np.linalg.norm(-H - Q) / np.linalg.norm(Q) < 0.10


# adjustments --------------------------------------------------------------

def test_scalar_examples():
    g = GodambeMatrices.from_PQ([[1.0]], [[4.0]])
    assert g.G[0, 0] == pytest.approx(16.0)
    assert g.asymptotic_cov[0, 0] == pytest.approx(1 / 16)
    assert g.C[0, 0] == pytest.approx(0.5)
    assert g.D[0, 0] == pytest.approx(2.0)
    assert open_faced_adjust([3.0], [[1.0]], [[4.0]], [1.0])[0, 0] == pytest.approx(2.0)
    assert curvature_adjust([3.0], [[1.0]], [[4.0]], [1.0])[0, 0] == pytest.approx(5.0)


def _spd(rng, d):
    A = rng.normal(size=(d, d))
    return A @ A.T + d * np.eye(d) * 0.3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_defining_relations(seed, d):
    rng = np.random.default_rng(seed)
    P, Q = _spd(rng, d), _spd(rng, d)
    G = Q @ np.linalg.solve(P, Q)
    D = curvature_matrix(P, Q)
    assert np.linalg.norm(D.T @ Q @ D - G) < 1e-8 * max(1.0, np.linalg.norm(G))
    C = open_faced_matrix(P, Q)
    target = np.linalg.solve(Q, np.linalg.solve(Q, P).T)
    assert np.allclose(C @ np.linalg.inv(Q) @ C.T, target, rtol=1e-8, atol=1e-12)
    assert np.allclose(open_faced_matrix(Q, Q), np.eye(d), atol=1e-10)
    assert np.allclose(curvature_matrix(Q, Q), np.eye(d), atol=1e-10)
    S = sqrtm_spd(Q)
    assert np.allclose(S @ S, Q) and np.allclose(sqrtm_spd(Q, inverse=True) @ S, np.eye(d), atol=1e-10)


def test_adjusted_chain_covariance_targets_inverse_godambe():
    rng = np.random.default_rng(3)
    P, Q = _spd(rng, 3), _spd(rng, 3)
    mode = np.array([1.0, -1.0, 0.5])
    X = rng.multivariate_normal(mode, np.linalg.inv(Q), size=20000)
    Qinv = np.linalg.inv(Q)
    assert np.linalg.norm(np.cov(X.T) - Qinv) / np.linalg.norm(Qinv) < 0.10
    adj = open_faced_adjust(X, P, Q, mode)
    Ginv = np.linalg.inv(Q @ np.linalg.solve(P, Q))
    assert np.linalg.norm(np.cov(adj.T) - Ginv) / np.linalg.norm(Ginv) < 0.10
    assert np.allclose(open_faced_adjust(mode[None, :], P, Q, mode), mode)
    full = np.column_stack([X, rng.normal(size=(X.shape[0], 2))])
    out = adjust_chain_theta(full, 3, GodambeMatrices.from_PQ(P, Q), mode)
    assert np.allclose(out[:, :3], adj) and np.array_equal(out[:, 3:], full[:, 3:])


def test_non_spd_inputs_raise():
    with pytest.raises(NotPositiveDefinite):
        sqrtm_spd(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotPositiveDefinite):
        open_faced_matrix(np.eye(2), -np.eye(2))


def test_json_round_trip_and_chain_source():
    model = _model(n=30, M=3, q=2)
    psi = _psi(np.random.default_rng(10), q=2)
    g = compute_godambe(model, psi)
    back = GodambeMatrices.from_dict(g.to_dict())
    for name in ("P_star", "Q_star", "G", "C", "D"):
        assert np.array_equal(getattr(back, name), getattr(g, name))
    assert g.to_dict()["G"]["shape"] == [2, 2]
    samples = np.random.default_rng(0).multivariate_normal(psi.theta_star, np.diag([0.01, 0.04]), 5000)
    gc = compute_godambe(model, psi, q_source="chain", chain_theta=samples)
    assert gc.source == "chain" and back.source == "analytic"
    assert np.allclose(gc.Q_star, np.linalg.inv(np.cov(samples.T)))
    with pytest.raises(ValueError):
        compute_godambe(model, psi, q_source="chain")
