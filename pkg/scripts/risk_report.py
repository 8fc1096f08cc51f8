"""Individual versus systemic risk on a grid with fixed sigma^2 / 2 theta.

Scaling sigma and theta together keeps each agent's stationary spread fixed
while the systemic exponent N * rate falls, so systemic risk rises.
"""
from __future__ import annotations

import argparse
import csv
import sys

from mfrisk.fluctuation import risk_comparison_report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ratios", type=float, nargs="+", default=[0.1, 0.2])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.5, 1.0, 1.5, 2.0])
    ap.add_argument("--h", type=float, default=0.05)
    ap.add_argument("--T", type=float, default=10.0)
    ap.add_argument("--N", type=int, default=100)
    args = ap.parse_args()

    grid = [
        {"h": args.h, "theta": s * s / (2.0 * r), "sigma": s, "T": args.T, "N": args.N}
        for r in args.ratios
        for s in args.sigmas
    ]
    rows = risk_comparison_report(grid)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


if __name__ == "__main__":
    main()
