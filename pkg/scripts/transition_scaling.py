"""Ensemble estimate of -log p_T against N, next to the large-deviation rates.

    python3 scripts/transition_scaling.py --replicas 2000 --ns 10 20 40
"""
from __future__ import annotations

import argparse
import json
import math

import numpy as np

from mfrisk import ModelParams
from mfrisk.largedev import minimize_reduced, rate_small_h
from mfrisk.simulate import run_ensemble


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--h", type=float, default=0.1)
    ap.add_argument("--theta", type=float, default=10.0)
    ap.add_argument("--sigma", type=float, default=1.0)
    ap.add_argument("--T", type=float, default=100.0)
    ap.add_argument("--dt", type=float, default=0.02)
    ap.add_argument("--ns", type=int, nargs="+", default=[10, 20, 40])
    ap.add_argument("--replicas", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    base = ModelParams(h=args.h, theta=args.theta, sigma=args.sigma, horizon=args.T, dt=args.dt)
    rows = []
    for n in args.ns:
        res = run_ensemble(base.replace(n_agents=n), args.replicas, args.seed, threads=args.threads)
        nlog = -math.log(res.p_hat) if res.p_hat > 0 else math.inf
        rows.append({"N": n, "p_hat": res.p_hat, "ci": [res.ci_low, res.ci_high], "neg_log_p": nlog})
        print(f"N={n:4d}  p_hat={res.p_hat:.4f}  [{res.ci_low:.4f}, {res.ci_high:.4f}]  -log p={nlog:.4f}")

    finite = [r for r in rows if math.isfinite(r["neg_log_p"])]
    slope = float(np.polyfit([r["N"] for r in finite], [r["neg_log_p"] for r in finite], 1)[0]) if len(finite) > 1 else math.nan
    summary = {
        "rows": rows,
        "fitted_slope": slope,
        "rate_small_h": rate_small_h(base),
        "rate_minimized": minimize_reduced(base).value,
    }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
