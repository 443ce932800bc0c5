import numpy as np
import pytest

from blockcal.covmodel import BlockGeometry, SpatialCovParams, ThetaCovParams
from blockcal.emulator import EmulatorFit
from blockcal.geo import SpatialGrid, random_tessellation, single_block


def random_grid(n, seed, regions=1, spread=(25.0, 35.0)):
    rng = np.random.default_rng(seed)
    lat = rng.uniform(-spread[0], spread[0], n)
    lon = rng.uniform(-spread[1], spread[1], n)
    region = rng.integers(0, regions, n) if regions > 1 else None
    if region is not None:
        lon = lon + 100.0 * region - 100.0  # keep regions spatially apart
    return SpatialGrid.from_arrays(lat, lon, region)


@pytest.fixture
def small_grid():
    return random_grid(15, 0)


@pytest.fixture
def small_fit():
    return EmulatorFit(SpatialCovParams(0.05, 1.0, 1 / 1500.0), ThetaCovParams(0.01, 1.0, (0.8,)))


@pytest.fixture
def geom_m1(small_grid):
    return BlockGeometry(small_grid, single_block(small_grid.n))


@pytest.fixture
def geom_blocks():
    grid = random_grid(60, 1)
    return BlockGeometry(grid, random_tessellation(grid, 4, 3))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(mod.RESULTS):
            terminalreporter.write_line(mod.RESULTS[k])
