import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from blockcal.calibrator import CalibrationProblem, CalibrationState, ProposalConfig, mh_sample, posterior_mode
from blockcal.covmodel import BlockGeometry, DiscrepancyCovParams, SpatialCovParams
from blockcal.datasets import TRUTH, default_design, discrepancy, synthetic_model, two_region_grid
from blockcal.emulator import fit_emulator
from blockcal.geo import single_block
from blockcal.godambe import LimitModel
from blockcal.oracle import (
    ExperimentConfig,
    block_count_sweep,
    chain_summary,
    experiment_data,
    full_loglik,
    full_posterior_grid,
    grid_summary,
    perfect_model_experiment,
    sample_gp_field,
    spatial_cov_dense,
)

from conftest import random_grid


def test_full_loglik_small_cases():
    assert full_loglik([0.7], [0.0], [[2.0]]) == pytest.approx(-0.5 * (np.log(2 * np.pi * 2.0) + 0.49 / 2.0))
    rng = np.random.default_rng(0)
    x, mu, d = rng.normal(size=5), rng.normal(size=5), rng.uniform(0.5, 2, 5)
    uni = sum(-0.5 * (np.log(2 * np.pi * s) + (a - m) ** 2 / s) for a, m, s in zip(x, mu, d))
    assert full_loglik(x, mu, np.diag(d)) == pytest.approx(uni, abs=1e-12)


def test_full_loglik_textbook_formula():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(10, 10))
    S = A @ A.T + np.eye(10)
    x, mu = rng.normal(size=10), rng.normal(size=10)
    r = x - mu
    ref = -0.5 * (10 * np.log(2 * np.pi) + np.log(np.linalg.det(S)) + r @ np.linalg.inv(S) @ r)
    assert full_loglik(x, mu, S) == pytest.approx(ref, abs=1e-9)


def test_posterior_grid_normalisation_symmetry_and_mode():
    t = np.linspace(-3, 5, 801)
    target = lambda x: -np.cosh(x - 1.0)
    d = full_posterior_grid(t, target)
    assert np.trapezoid(d, t) == pytest.approx(1.0, abs=1e-10)
    k = np.arange(1, 300)
    i0 = int(np.argmin(np.abs(t - 1.0)))
    assert np.allclose(d[i0 - k], d[i0 + k], rtol=1e-9)
    skew = lambda x: -0.5 * (x - 0.3) ** 2 - 0.1 * (x - 0.3) ** 3 if x > -2 else -np.inf
    d = full_posterior_grid(t, skew)
    gold = minimize_scalar(lambda x: -skew(x), bracket=(-1, 0.3, 2), method="golden").x
    assert abs(grid_summary(t, d)["mode"] - gold) <= t[1] - t[0]
    with pytest.raises(ValueError):
        full_posterior_grid(t[::-1], target)
    with pytest.raises(ValueError):
        full_posterior_grid(t, lambda x: -np.inf)


def test_grid_summary_gaussian():
    t = np.linspace(-8, 12, 4001)
    d = np.exp(-0.5 * ((t - 2) / 1.5) ** 2)
    s = grid_summary(t, d / np.trapezoid(d, t))
    assert s["mean"] == pytest.approx(2.0, abs=1e-6) and s["sd"] == pytest.approx(1.5, rel=1e-4)
    assert s["lower"] == pytest.approx(2 - 1.959964 * 1.5, abs=2e-3)
    assert s["upper"] == pytest.approx(2 + 1.959964 * 1.5, abs=2e-3)


def test_gp_field_sampler():
    grid = random_grid(25, 0)
    p = DiscrepancyCovParams(0.1, 4.0, 1 / 800)
    assert np.array_equal(sample_gp_field(grid, p, 3), sample_gp_field(grid, p, 3))
    assert not np.array_equal(sample_gp_field(grid, p, 3), sample_gp_field(grid, p, 4))
    assert np.abs(sample_gp_field(grid, DiscrepancyCovParams(0.1, 1e-30, 1 / 800), 1)).max() < 1e-13
    corr = DiscrepancyCovParams(0.1, 4.0, 1 / 4000)
    draws = sample_gp_field(grid, corr, 7, size=2000)
    K = spatial_cov_dense(grid, corr)
    emp = draws.T @ draws / draws.shape[0]
    assert np.linalg.norm(emp - K) / np.linalg.norm(K) < 0.10
    assert np.var(draws[:1000, 0]) == pytest.approx(4.0 * 1.1, rel=0.10)
    with pytest.raises(ValueError):
        sample_gp_field(grid, p, 0, limit=10)


def test_chain_summary_and_config_guards():
    s = chain_summary(np.arange(1001.0), mode=500.0)
    assert s["lower"] == pytest.approx(25.0) and s["upper"] == pytest.approx(975.0) and s["mode"] == 500.0
    with pytest.raises(ValueError):
        ExperimentConfig(truth=2.0)
    with pytest.raises(ValueError):
        ExperimentConfig(n=2000)
    cfg = ExperimentConfig(n=80, M=3)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_datasets():
    grid = two_region_grid(60, seed=2)
    assert grid.n == 60 and set(np.unique(grid.region)) == {0, 1}
    assert np.array_equal(two_region_grid(60, seed=2).lat, grid.lat)
    d = default_design()
    assert d.p == 10 and TRUTH in d.thetas[:, 0] and d.bounds == ((0.5, 5.5),)
    model = synthetic_model(grid)
    out = model.run([1.0, np.e])
    assert np.allclose(out[:, 0], model.base) and np.allclose(out[:, 1] - out[:, 0], model.amp)
    z = discrepancy(grid, 1)
    assert z.shape == (60,) and 50 < z.std() < 2000


@pytest.fixture(scope="module")
def small_data():
    cfg = ExperimentConfig(n=60, M=3, steps=1000, oracle_points=201)
    data = experiment_data(cfg)
    return cfg, data, fit_emulator(data.ensemble, data.design, data.geom)


def test_single_block_composite_equals_full_posterior(small_data):
    cfg, data, fit = small_data
    geom = BlockGeometry(data.grid, single_block(data.grid.n))
    z = data.model.run(TRUTH)[:, 0] + discrepancy(data.grid, 5)
    prob = CalibrationProblem(z, data.ensemble, data.design, geom, fit)
    psi = CalibrationState((TRUTH,), fit.xi_s.kappa_s, 0.01, 160000.0, 1 / 690)
    Ks = spatial_cov_dense(data.grid, fit.xi_s)
    Kd = spatial_cov_dense(data.grid, DiscrepancyCovParams(0.01, 160000.0, 1 / 690))
    t = np.linspace(0.6, 5.4, 97)

    def full(x):
        w, v = prob.emulator_at((x,))
        return full_loglik(z, w, v * Ks + Kd)

    a = full_posterior_grid(t, lambda x: prob.loglik(CalibrationState((x,), *psi.to_vector()[1:])))
    b = full_posterior_grid(t, full)
    assert np.allclose(a, b, rtol=1e-7, atol=1e-12)


def test_noiseless_truth_is_recovered(small_data):
    # exact emulator (zeta_theta = 0) and no discrepancy: the likelihood peaks at the truth
    cfg, data, fit = small_data

    def mean_fn(t):
        t = float(np.atleast_1d(t)[0])
        return data.model.run(t)[:, 0], (data.model.amp / t)[:, None]

    model = LimitModel.measurement_error(mean_fn(TRUTH)[0], data.geom, fit.xi_s, mean_fn, 0.0)
    psi = CalibrationState((TRUTH,), fit.xi_s.kappa_s, 1e-6, 1e-6, 1 / 690)
    t = np.linspace(0.5, 5.5, 401)
    ll = [model.loglik(CalibrationState((x,), *psi.to_vector()[1:])) for x in t]
    assert abs(t[int(np.argmax(ll))] - TRUTH) <= t[1] - t[0]


def test_grid_and_chain_agree(small_data):
    cfg, data, fit = small_data
    z = data.model.run(TRUTH)[:, 0] + discrepancy(data.grid, 9)
    prob = CalibrationProblem(z, data.ensemble, data.design, data.geom, fit)
    rest = CalibrationState((TRUTH,), fit.xi_s.kappa_s, 0.01, 160000.0, 1 / 690).to_vector()[1:]

    def target(x):
        if not 0.5 <= x[0] <= 5.5:
            return -np.inf
        return prob.loglik(CalibrationState((x[0],), *rest))

    t = np.linspace(0.5, 5.5, 251)
    s = grid_summary(t, full_posterior_grid(t, lambda x: target([x])))
    chain = mh_sample(target, [s["mode"]], 30000, seed=3, config=ProposalConfig(scales=0.2))
    x = chain.post_warmup()[:, 0]
    step = t[1] - t[0]
    assert abs(posterior_mode(chain, target)[0] - s["mode"]) <= step
    lo, hi = np.quantile(x, [0.025, 0.975])
    assert abs(lo - s["lower"]) <= 2 * step and abs(hi - s["upper"]) <= 2 * step


@pytest.mark.slow
def test_experiment_report_and_determinism(small_data):
    cfg, data, fit = small_data
    r1 = perfect_model_experiment(cfg, data, fit)
    r2 = perfect_model_experiment(cfg, data, fit)
    assert r1.to_dict()["composite"] == r2.to_dict()["composite"]
    for part in (r1.composite, r1.adjusted, r1.oracle):
        assert part["lower"] < part["upper"]
        assert all(np.isfinite(v) for v in part.values())
    assert set(r1.covers) == {"composite", "adjusted", "oracle", "mode_within_oracle_sd"}
    assert r1.truth == TRUTH
    json.dumps(r1.to_dict())
    for name in ("composite", "adjusted", "oracle"):
        assert np.trapezoid(r1.densities[name], r1.densities["theta"]) == pytest.approx(1.0, abs=0.02)


@pytest.mark.slow
def test_block_count_sweep_is_deterministic():
    cfg = ExperimentConfig(n=50, steps=1000, adjust=False, oracle=False)
    a = block_count_sweep(cfg, [1, 4])
    b = block_count_sweep(cfg, [1, 4])
    assert a == b
    assert [r["M"] for r in a["rows"]] == [1, 4]
