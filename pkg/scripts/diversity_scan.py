"""Exact versus expanded diversity quantities over a range of delta.

Prints residuals divided by delta^3 for the reference and corrected expansions.
"""
from __future__ import annotations

import argparse

import numpy as np

from mfrisk.diversity import (
    DiversityPerturbation,
    diversity_expansion,
    transition_probability_diverse,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--theta-bar", type=float, default=2.0)
    ap.add_argument("--alphas", type=float, nargs="+", default=[-1.0, 1.0])
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.5, 0.5])
    ap.add_argument("--sigma", type=float, default=0.5)
    ap.add_argument("--N", type=int, default=100)
    ap.add_argument("--T", type=float, default=10.0)
    ap.add_argument("--deltas", type=float, nargs="+", default=list(np.geomspace(0.2, 0.025, 4)))
    args = ap.parse_args()

    print(f"{'delta':>8} {'logp exact':>12} {'pub/d^3':>10} {'corr/d^3':>10} {'xi2 pub/d^3':>12} {'xi2 corr/d^3':>13}")
    for d in args.deltas:
        pert = DiversityPerturbation(args.theta_bar, tuple(args.alphas), tuple(args.fractions), d)
        ex = transition_probability_diverse(pert.groups(), args.sigma, args.N, args.T)
        pub = diversity_expansion(pert, args.sigma, args.N, args.T)
        cor = diversity_expansion(pert, args.sigma, args.N, args.T, corrected=True)
        d3 = d**3
        print(
            f"{d:8.4f} {ex.log_p:12.6f} {abs(ex.log_p - pub.log_p) / d3:10.4f} "
            f"{abs(ex.log_p - cor.log_p) / d3:10.4f} {abs(ex.xi_b**2 - pub.xi_b2) / d3:12.4f} "
            f"{abs(ex.xi_b**2 - cor.xi_b2) / d3:13.4f}"
        )


if __name__ == "__main__":
    main()
