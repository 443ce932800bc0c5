"""Regenerate the synthetic CSVs shipped in src/blockcal/data."""

from pathlib import Path

import numpy as np

from blockcal import io
from blockcal.datasets import default_design, discrepancy, synthetic_model, two_region_grid
from blockcal.oracle import ExperimentConfig

OUT = Path(__file__).resolve().parents[1] / "src" / "blockcal" / "data"


def main():
    cfg = ExperimentConfig()
    grid = two_region_grid(cfg.n, cfg.grid_seed)
    model = synthetic_model(grid, cfg.model_seed)
    full = default_design(cfg.design)
    k = list(cfg.design).index(cfg.truth)
    train = full.drop(k)
    train_ens = model.ensemble(train)
    io.write_grid(OUT / "grid.csv", grid)
    io.write_design(OUT / "design.csv", train)
    io.write_ensemble(OUT / "ensemble.csv", grid, train, train_ens)
    z = model.run(cfg.truth)[:, 0] + discrepancy(grid, cfg.disc_seed, cfg.zeta_d, cfg.kappa_d, cfg.range_d_km)
    io.write_observations(OUT / "observations.csv", grid, z)
    io.write_json(OUT / "truth.json", {
        "theta_star": cfg.truth, "held_out_id": full.ids[k], "discrepancy_seed": cfg.disc_seed,
        "zeta_d": cfg.zeta_d, "kappa_d": cfg.kappa_d, "range_d_km": cfg.range_d_km,
        "note": "synthetic stand-in data; observations are the held-out run plus a discrepancy draw",
    })
    print(f"wrote {OUT} (n={grid.n}, p={train_ens.p})")


if __name__ == "__main__":
    main()
