"""Interval widths across discrepancy sills and across block counts."""

import argparse
import json
import time

from blockcal import io
from blockcal.oracle import ExperimentConfig, block_count_sweep, dispersion_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("which", choices=["kappa", "blocks"])
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--first-seed", type=int, default=2000)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default=None)
    a = ap.parse_args()
    cfg = ExperimentConfig(adjust=False, oracle=False)
    seeds = range(a.first_seed, a.first_seed + a.reps)
    t0 = time.perf_counter()
    if a.which == "kappa":
        res = dispersion_sweep(cfg, [40000.0, 90000.0, 160000.0], seeds, a.threads)
        key = "kappa_d"
    else:
        res = block_count_sweep(cfg, [10, 30, 50], seeds, a.threads)
        key = "M"
    for row in res["rows"]:
        print(f"{key}={row[key]:<10g} mean width {row['mean_width']:.4f}")
    print(json.dumps({"seconds": round(time.perf_counter() - t0, 1)}))
    io.write_json(a.out or f"sweep_{a.which}.json", res)


if __name__ == "__main__":
    main()
