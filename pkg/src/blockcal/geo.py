"""Spatial locations, great-circle distances, random tessellation and regridding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import OutOfDomain, RegionUnreachable

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class Location:
    index: int
    lat: float
    lon: float
    region: int = 0

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180)")


class SpatialGrid:
    """Ordered, immutable collection of locations.

    Positions ``0..n-1`` (the iteration order) are what blockings and data
    vectors refer to; ``Location.index`` is the external id kept for files.
    """

    def __init__(self, locations: Sequence[Location]):
        locations = tuple(locations)
        if not locations:
            raise ValueError("a grid needs at least one location")
        ids = [loc.index for loc in locations]
        if len(set(ids)) != len(ids):
            raise ValueError("location indices must be unique")
        self._locations = locations
        self.lat = np.array([loc.lat for loc in locations], dtype=float)
        self.lon = np.array([loc.lon for loc in locations], dtype=float)
        self.region = np.array([loc.region for loc in locations], dtype=int)
        self.ids = np.array(ids, dtype=int)
        for a in (self.lat, self.lon, self.region, self.ids):
            a.flags.writeable = False

    @classmethod
    def from_arrays(cls, lat, lon, region=None, ids=None) -> "SpatialGrid":
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        n = lat.size
        region = np.zeros(n, dtype=int) if region is None else np.asarray(region)
        ids = np.arange(n) if ids is None else np.asarray(ids)
        return cls(
            Location(int(i), float(a), float(b), int(r))
            for i, a, b, r in zip(ids, lat, lon, region)
        )

    @property
    def n(self) -> int:
        return len(self._locations)

    @property
    def locations(self) -> tuple[Location, ...]:
        return self._locations

    def __len__(self):
        return self.n

    def __iter__(self):
        return iter(self._locations)

    def __getitem__(self, pos: int) -> Location:
        return self._locations[pos]

    def distances(self, rows=None, cols=None, radius: float = EARTH_RADIUS_KM) -> np.ndarray:
        """Great-circle distance matrix between grid positions ``rows`` and ``cols``."""
        rows = np.arange(self.n) if rows is None else np.asarray(rows, dtype=int)
        cols = rows if cols is None else np.asarray(cols, dtype=int)
        return haversine(
            self.lat[rows][:, None], self.lon[rows][:, None],
            self.lat[cols][None, :], self.lon[cols][None, :], radius,
        )


def haversine(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_KM):
    """Vectorised haversine distance in the units of ``radius``."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    # clip guards rounding just above 1 at antipodes
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def geodesic_distance(a: Location, b: Location, radius: float = EARTH_RADIUS_KM) -> float:
    return float(haversine(a.lat, a.lon, b.lat, b.lon, radius))


@dataclass(frozen=True)
class Blocking:
    """Partition of grid positions into M blocks.

    Each block is sorted ascending, so its omitted location (the largest
    position) is always the last entry. ``subsample`` holds, per block, the
    sorted positions used by the subsampled block-mean covariance.
    """

    blocks: tuple[tuple[int, ...], ...]
    omitted: tuple[int, ...]
    subsample: tuple[tuple[int, ...], ...]
    seed: int | None = None
    centroids: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.omitted) != len(self.blocks) or len(self.subsample) != len(self.blocks):
            raise ValueError("blocks, omitted and subsample must have equal length")
        for b, o, sub in zip(self.blocks, self.omitted, self.subsample):
            if not b:
                raise ValueError("empty block")
            if list(b) != sorted(b):
                raise ValueError("block positions must be sorted")
            if o != b[-1]:
                raise ValueError("omitted location must be the largest position in its block")
            if not sub or not set(sub) <= set(b) or list(sub) != sorted(set(sub)):
                raise ValueError("subsample must be a sorted non-empty subset of its block")

    @property
    def M(self) -> int:
        return len(self.blocks)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(b) for b in self.blocks])

    @property
    def n(self) -> int:
        return int(self.sizes.sum())

    def check_partition(self, n: int) -> None:
        flat = sorted(i for b in self.blocks for i in b)
        if flat != list(range(n)):
            raise ValueError("blocks do not partition the grid positions")

    def to_dict(self) -> dict:
        return {
            "blocks": [list(b) for b in self.blocks],
            "omitted": list(self.omitted),
            "subsample": [list(s) for s in self.subsample],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Blocking":
        return cls(
            blocks=tuple(tuple(int(i) for i in b) for b in d["blocks"]),
            omitted=tuple(int(i) for i in d["omitted"]),
            subsample=tuple(tuple(int(i) for i in s) for s in d["subsample"]),
            seed=d.get("seed"),
        )

    @classmethod
    def from_labels(cls, labels, m_max: int | None = None, seed: int | None = None) -> "Blocking":
        """Blocks from an integer label per position (labels ordered by first appearance of sorted values)."""
        labels = np.asarray(labels)
        blocks = tuple(tuple(int(i) for i in np.flatnonzero(labels == lab)) for lab in np.unique(labels))
        rng = np.random.default_rng(seed)
        subs = tuple(_draw_subsample(b, m_max, rng) for b in blocks)
        return cls(blocks, tuple(b[-1] for b in blocks), subs, seed)


def _draw_subsample(block: tuple[int, ...], m_max: int | None, rng) -> tuple[int, ...]:
    if m_max is None or m_max >= len(block):
        return tuple(block)
    pick = rng.choice(len(block), size=m_max, replace=False)
    return tuple(sorted(block[k] for k in pick))


def single_block(n: int) -> Blocking:
    b = tuple(range(n))
    return Blocking((b,), (n - 1,), (b,), None)


def random_tessellation(
    grid: SpatialGrid,
    M: int,
    seed: int,
    m_max: int = 10,
    max_retries: int = 100,
    radius: float = EARTH_RADIUS_KM,
) -> Blocking:
    """Nearest-centroid tessellation around ``M`` randomly drawn grid locations.

    Locations only join centroids of their own region. Centroid sets are
    redrawn until every region holds at least one centroid.
    """
    n = grid.n
    if not 1 <= M <= n:
        raise ValueError(f"need 1 <= M <= n, got M={M}, n={n}")
    regions = np.unique(grid.region)
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        cents = np.sort(rng.choice(n, size=M, replace=False))
        if set(regions) <= set(grid.region[cents]):
            break
    else:
        raise RegionUnreachable(
            f"no draw of {M} centroids covered all {regions.size} regions in {max_retries} tries"
        )

    d = grid.distances(np.arange(n), cents, radius)
    d[grid.region[:, None] != grid.region[cents][None, :]] = np.inf
    # argmin returns the first minimum: ties go to the lower centroid index
    owner = np.argmin(d, axis=1)
    owner[cents] = np.arange(M)
    blocks = tuple(tuple(int(i) for i in np.flatnonzero(owner == k)) for k in range(M))
    subs = tuple(_draw_subsample(b, m_max, rng) for b in blocks)
    return Blocking(blocks, tuple(b[-1] for b in blocks), subs, seed, tuple(int(c) for c in cents))


@dataclass(frozen=True)
class RegularField:
    """Values on a rectilinear lat-lon grid; NaN marks masked cells."""

    lats: np.ndarray
    lons: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.lats.size, self.lons.size):
            raise ValueError("values must have shape (len(lats), len(lons))")
        if np.any(np.diff(self.lats) <= 0) or np.any(np.diff(self.lons) <= 0):
            raise ValueError("lats and lons must be strictly increasing")
        if self.lats.size < 2 or self.lons.size < 2:
            raise ValueError("need at least a 2x2 grid")


def bilinear_regrid(src: RegularField, lat, lon, outside: str = "raise"):
    """Bilinear interpolation of ``src`` at target points.

    Returns ``(values, missing)``. A target is missing when any enclosing node
    with nonzero weight is masked, or (with ``outside="flag"``) when it falls
    outside the source grid.
    """
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    out = (lat < src.lats[0]) | (lat > src.lats[-1]) | (lon < src.lons[0]) | (lon > src.lons[-1])
    if out.any() and outside == "raise":
        k = int(np.flatnonzero(out)[0])
        raise OutOfDomain(f"target ({lat[k]}, {lon[k]}) lies outside the source grid")

    i = np.clip(np.searchsorted(src.lats, lat, side="right") - 1, 0, src.lats.size - 2)
    j = np.clip(np.searchsorted(src.lons, lon, side="right") - 1, 0, src.lons.size - 2)
    ty = (lat - src.lats[i]) / (src.lats[i + 1] - src.lats[i])
    tx = (lon - src.lons[j]) / (src.lons[j + 1] - src.lons[j])
    corners = [
        ((1 - ty) * (1 - tx), src.values[i, j]),
        ((1 - ty) * tx, src.values[i, j + 1]),
        (ty * (1 - tx), src.values[i + 1, j]),
        (ty * tx, src.values[i + 1, j + 1]),
    ]
    vals = np.zeros(lat.size)
    missing = out.copy()
    for w, v in corners:
        active = w > 0
        missing |= active & np.isnan(v)
        vals += np.where(active, w * np.nan_to_num(v), 0.0)
    vals[missing] = np.nan
    return vals, missing
