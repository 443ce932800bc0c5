"""Sampling variance of the maximum composite likelihood estimate against the Godambe prediction."""

import argparse
import json

from blockcal.oracle import measurement_error_mc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--M", type=int, default=5)
    ap.add_argument("--reps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    res = measurement_error_mc(a.n, a.M, a.reps, a.seed)
    res.pop("estimates")
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
