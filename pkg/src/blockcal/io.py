"""CSV and JSON persistence for grids, fields, ensembles, designs, blockings and chains."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .calibrator import PosteriorChain
from .emulator import ModelOutputEnsemble, ParameterDesign
from .errors import ParseError
from .geo import Blocking, Location, RegularField, SpatialGrid


def fmt(x: float) -> str:
    """Shortest round-tripping decimal text for a float."""
    return repr(float(x))


def _rows(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        for row in reader:
            if row:
                yield reader.line_num, header, row


def _float(path, line, text, what):
    try:
        return float(text)
    except ValueError:
        raise ParseError(path, line, f"{what}: cannot parse {text!r} as a number") from None


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, e.msg) from None


# grids -------------------------------------------------------------------

GRID_HEADER = ["index", "lat", "lon", "region"]


def read_grid(path) -> SpatialGrid:
    locs = []
    for line, header, row in _rows(path):
        if header != GRID_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(GRID_HEADER)}")
        if len(row) != 4:
            raise ParseError(path, line, f"expected 4 fields, got {len(row)}")
        try:
            locs.append(Location(int(row[0]), _float(path, line, row[1], "lat"),
                                 _float(path, line, row[2], "lon"), int(row[3])))
        except ValueError as e:
            raise ParseError(path, line, str(e)) from None
    if not locs:
        raise ParseError(path, 2, "no locations")
    try:
        return SpatialGrid(locs)
    except ValueError as e:
        raise ParseError(path, 1, str(e)) from None


def write_grid(path, grid: SpatialGrid) -> None:
    _write_csv(path, GRID_HEADER, [[loc.index, fmt(loc.lat), fmt(loc.lon), loc.region] for loc in grid])


# regular fields -----------------------------------------------------------

def read_field(path) -> RegularField:
    """``lat,lon,value`` rows covering a full rectilinear grid; ``NA`` marks masked cells."""
    pts = {}
    for line, header, row in _rows(path):
        if [h.strip() for h in header] != ["lat", "lon", "value"]:
            raise ParseError(path, 1, "expected header lat,lon,value")
        if len(row) != 3:
            raise ParseError(path, line, f"expected 3 fields, got {len(row)}")
        la = _float(path, line, row[0], "lat")
        lo = _float(path, line, row[1], "lon")
        v = np.nan if row[2].strip() == "NA" else _float(path, line, row[2], "value")
        pts[(la, lo)] = v
    lats = np.array(sorted({k[0] for k in pts}))
    lons = np.array(sorted({k[1] for k in pts}))
    if len(pts) != lats.size * lons.size:
        raise ParseError(path, 1, "rows do not form a complete rectilinear grid")
    vals = np.array([[pts[(a, b)] for b in lons] for a in lats])
    return RegularField(lats, lons, vals)


def write_field(path, field: RegularField) -> None:
    rows = [[fmt(a), fmt(b), "NA" if np.isnan(field.values[i, j]) else fmt(field.values[i, j])]
            for i, a in enumerate(field.lats) for j, b in enumerate(field.lons)]
    _write_csv(path, ["lat", "lon", "value"], rows)


# designs and ensembles ----------------------------------------------------

def read_design(path) -> ParameterDesign:
    ids, rows = [], []
    for line, header, row in _rows(path):
        if not header or header[0] != "id" or len(header) < 2:
            raise ParseError(path, 1, "expected header id,theta_1..theta_q")
        if len(row) != len(header):
            raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
        ids.append(row[0])
        rows.append([_float(path, line, x, h) for x, h in zip(row[1:], header[1:])])
    if not rows:
        raise ParseError(path, 2, "no design points")
    return ParameterDesign(np.array(rows), tuple(ids))


def write_design(path, design: ParameterDesign) -> None:
    header = ["id"] + [f"theta_{k + 1}" for k in range(design.q)]
    _write_csv(path, header, [[i, *map(fmt, t)] for i, t in zip(design.ids, design.thetas)])


def read_ensemble(path, grid: SpatialGrid | None = None, design: ParameterDesign | None = None):
    """Ensemble CSV: location index, then one column per design id.

    Columns are reordered to ``design.ids`` and rows to the grid order when given.
    """
    idx, rows, header = [], [], None
    for line, header, row in _rows(path):
        if len(row) != len(header):
            raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
        try:
            idx.append(int(row[0]))
        except ValueError:
            raise ParseError(path, line, f"bad location index {row[0]!r}") from None
        rows.append([_float(path, line, x, h) for x, h in zip(row[1:], header[1:])])
    if header is None or not rows:
        raise ParseError(path, 2, "no ensemble rows")
    Y = np.array(rows)
    cols = header[1:]
    if design is not None:
        missing = [d for d in design.ids if d not in cols]
        if missing:
            raise ParseError(path, 1, f"missing design columns {missing}")
        Y = Y[:, [cols.index(d) for d in design.ids]]
    if grid is not None:
        pos = {int(i): k for k, i in enumerate(idx)}
        try:
            Y = Y[[pos[int(i)] for i in grid.ids]]
        except KeyError as e:
            raise ParseError(path, 1, f"location {e.args[0]} missing from ensemble") from None
    return ModelOutputEnsemble(Y)


def write_ensemble(path, grid: SpatialGrid, design: ParameterDesign, ens: ModelOutputEnsemble) -> None:
    _write_csv(path, ["index", *design.ids],
               [[int(i), *map(fmt, r)] for i, r in zip(grid.ids, ens.Y)])


def read_observations(path, grid: SpatialGrid | None = None) -> np.ndarray:
    """Observations CSV ``index,value``, reordered to the grid when given."""
    idx, vals = [], []
    for line, header, row in _rows(path):
        if len(row) != 2:
            raise ParseError(path, line, f"expected 2 fields, got {len(row)}")
        try:
            idx.append(int(row[0]))
        except ValueError:
            raise ParseError(path, line, f"bad location index {row[0]!r}") from None
        vals.append(_float(path, line, row[1], "value"))
    z = np.array(vals)
    if grid is not None:
        pos = {i: k for k, i in enumerate(idx)}
        try:
            z = z[[pos[int(i)] for i in grid.ids]]
        except KeyError as e:
            raise ParseError(path, 1, f"location {e.args[0]} missing from observations") from None
    return z


def write_observations(path, grid: SpatialGrid, z) -> None:
    _write_csv(path, ["index", "value"], [[int(i), fmt(v)] for i, v in zip(grid.ids, z)])


# blockings ----------------------------------------------------------------

def read_blocking(path) -> Blocking:
    d = read_json(path)
    try:
        return Blocking.from_dict(d)
    except (KeyError, ValueError, TypeError) as e:
        raise ParseError(path, 1, f"invalid blocking: {e}") from None


def write_blocking(path, blocking: Blocking) -> None:
    write_json(path, blocking.to_dict())


# chains -------------------------------------------------------------------

def write_chain(path, chain: PosteriorChain, adjusted: bool | None = None) -> None:
    """Samples CSV (one row per step) plus a ``.json`` sidecar next to it."""
    header = [*chain.names, "logpost"]
    if adjusted is not None:
        header.append("adjusted")
    rows = []
    for x, lp in zip(chain.samples, chain.logpost):
        r = [*map(fmt, x), fmt(lp)]
        if adjusted is not None:
            r.append(int(adjusted))
        rows.append(r)
    _write_csv(path, header, rows)
    write_json(Path(path).with_suffix(".json"), _sidecar_json(chain.sidecar()))


def _sidecar_json(d: dict) -> dict:
    out = dict(d)
    st = out.get("rng_state")
    if st:
        out["rng_state"] = json.loads(json.dumps(st, default=int))
    return out


def read_chain(path) -> tuple[PosteriorChain, bool | None]:
    path = Path(path)
    side = read_json(path.with_suffix(".json"))
    names = side["names"]
    samples, logpost, flags = [], [], []
    for line, header, row in _rows(path):
        if header[: len(names)] != names or header[len(names)] != "logpost":
            raise ParseError(path, 1, "chain header does not match its sidecar")
        if len(row) != len(header):
            raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
        vals = [_float(path, line, x, h) for x, h in zip(row, header)]
        samples.append(vals[: len(names)])
        logpost.append(vals[len(names)])
        if len(header) > len(names) + 1:
            flags.append(bool(vals[-1]))
    samples = np.array(samples).reshape(-1, len(names))
    chain = PosteriorChain.from_arrays(samples, np.array(logpost), side)
    return chain, (flags[0] if flags else None)
