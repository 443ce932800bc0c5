"""Synthetic stand-in data: a two-region grid, a smooth model ensemble and noisy observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covmodel import DiscrepancyCovParams, SpatialCovParams
from .emulator import ModelOutputEnsemble, ParameterDesign
from .geo import SpatialGrid
from .oracle import sample_gp_field

TRUTH = 2.153
DESIGN_1D = (0.5, 1.1, 1.6, 2.153, 2.7, 3.2, 3.8, 4.3, 4.9, 5.5)
# two lat-lon boxes standing in for separate ocean basins
REGION_BOXES = (((-40.0, 40.0), (-170.0, -110.0)), ((-40.0, 40.0), (-40.0, 20.0)))


def two_region_grid(n: int = 200, seed: int = 11, step: float = 4.0) -> SpatialGrid:
    """Random points from a regular ``step``-degree lattice in two boxes, half per box."""
    rng = np.random.default_rng(seed)
    lat, lon, reg = [], [], []
    sizes = (n // 2, n - n // 2)
    for r, (((la0, la1), (lo0, lo1)), k) in enumerate(zip(REGION_BOXES, sizes)):
        la = np.arange(la0, la1 + 1e-9, step)
        lo = np.arange(lo0, lo1 + 1e-9, step)
        cells = np.array([(a, b) for a in la for b in lo])
        if k > len(cells):
            raise ValueError(f"region {r} holds only {len(cells)} lattice cells")
        pick = np.sort(rng.choice(len(cells), size=k, replace=False))
        lat.extend(cells[pick, 0])
        lon.extend(cells[pick, 1])
        reg.extend([r] * k)
    return SpatialGrid.from_arrays(lat, lon, reg)


def response(theta) -> np.ndarray:
    """Smooth monotone response of the model to its scalar input."""
    return np.log(np.asarray(theta, dtype=float))


@dataclass(frozen=True)
class SyntheticModel:
    """Deterministic model ``Y(s, theta) = base(s) + amp(s) * log(theta)``."""

    grid: SpatialGrid
    base: np.ndarray
    amp: np.ndarray

    def run(self, theta) -> np.ndarray:
        t = np.atleast_1d(np.asarray(theta, dtype=float)).ravel()
        return self.base[:, None] + self.amp[:, None] * response(t)[None, :]

    def ensemble(self, design: ParameterDesign) -> ModelOutputEnsemble:
        return ModelOutputEnsemble(self.run(design.thetas[:, 0]))


def synthetic_model(grid: SpatialGrid, seed: int = 5, base_sd: float = 800.0,
                    amp_mean: float = 1000.0, amp_sd: float = 300.0,
                    range_km: float = 2000.0) -> SyntheticModel:
    """Spatial patterns drawn from smooth exponential-kernel fields."""
    p = SpatialCovParams(1e-6, 1.0, 1.0 / range_km)
    fields = sample_gp_field(grid, p, seed, size=2)
    return SyntheticModel(grid, base_sd * fields[0], amp_mean + amp_sd * fields[1])


def default_design(values=DESIGN_1D) -> ParameterDesign:
    return ParameterDesign(np.asarray(values, dtype=float)[:, None],
                           tuple(f"run{k:02d}" for k in range(len(values))), ((0.5, 5.5),))


def discrepancy(grid: SpatialGrid, seed: int, zeta_d: float = 0.01, kappa_d: float = 160000.0,
                range_km: float = 690.0) -> np.ndarray:
    return sample_gp_field(grid, DiscrepancyCovParams(zeta_d, kappa_d, 1.0 / range_km), seed)
