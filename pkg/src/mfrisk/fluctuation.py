"""Linearised fluctuations of agents around the normal state -1.

With x_j = -1 + z_j the linearised system is

    dz_j = -(theta + 2h) z_j dt + theta zbar dt + sigma dw_j,
    dzbar = -2h zbar dt + (sigma / N) sum_j dw_j,

started from zero.  ``var_mean`` and ``var_agent_limit`` are the reference
closed forms; ``var_mean_ou`` and ``var_agent_finite_n`` are the exact
variances of the linear system above.  The two mean formulas differ: the
exact stationary value is sigma^2 / (4 h N), not sigma^2 / N.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .equilibrium import small_h_equilibrium
from .model import InvalidParams, ModelParams, validate
from .simulate import replica_generator

REGIME_LIMIT = 0.25  # linearisation needs std well below the distance 1 to the barrier


@dataclass(frozen=True)
class FluctuationReport:
    t: float
    var_mean: float
    var_agent_limit: float
    var_mean_ou: float
    var_agent_finite_n: float
    stationary_mean: float
    stationary_agent: float
    mean_noise_small: bool
    agent_noise_small: bool

    def as_row(self, exact: bool = False) -> dict:
        row = {"t": self.t, "var_mean_cf": self.var_mean, "var_agent_cf": self.var_agent_limit}
        if exact:
            row.update(var_mean_ou=self.var_mean_ou, var_agent_finite_n=self.var_agent_finite_n)
        return row


def _ou_var(rate: float, noise2: float, t: float) -> float:
    if rate == 0:
        return noise2 * t
    return noise2 / (2.0 * rate) * -math.expm1(-2.0 * rate * t)


def linearized_variances(params: ModelParams, t: float) -> FluctuationReport:
    if t < 0:
        raise ValueError("t must be nonnegative")
    s2, n, h = params.sigma**2, params.n_agents, params.h
    kappa = params.theta + 2.0 * h
    var_mean = s2 / n * -math.expm1(-4.0 * h * t)
    var_agent = s2 / (2.0 * kappa) * -math.expm1(-2.0 * kappa * t)
    var_mean_ou = _ou_var(2.0 * h, s2 / n, t)
    var_dev = _ou_var(kappa, s2 * (1.0 - 1.0 / n), t)
    return FluctuationReport(
        t=float(t),
        var_mean=var_mean,
        var_agent_limit=var_agent,
        var_mean_ou=var_mean_ou,
        var_agent_finite_n=var_mean_ou + var_dev,
        stationary_mean=s2 / n,
        stationary_agent=s2 / (2.0 * kappa),
        mean_noise_small=s2 / n < REGIME_LIMIT,
        agent_noise_small=s2 / (2.0 * kappa) < REGIME_LIMIT,
    )


@dataclass
class FluctuationComparison:
    report: FluctuationReport
    replicas: int
    var_mean_mc: float
    var_agent_mc: float
    se_mean: float
    se_agent: float
    warnings: list[str] = field(default_factory=list)

    def as_row(self, exact: bool = False) -> dict:
        row = self.report.as_row()
        row.update(
            var_mean_mc=self.var_mean_mc,
            var_agent_mc=self.var_agent_mc,
            se_mean=self.se_mean,
            se_agent=self.se_agent,
        )
        if exact:
            row.update(
                var_mean_ou=self.report.var_mean_ou,
                var_agent_finite_n=self.report.var_agent_finite_n,
            )
        return row


def _sample_var_se(x: np.ndarray) -> tuple[float, float]:
    """Sample variance and its standard error from the fourth central moment."""
    n = x.size
    c = x - x.mean()
    var = float(c @ c) / (n - 1)
    m4 = float(np.mean(c**4))
    return var, math.sqrt(max(m4 - var * var, 0.0) / n)


def _check_linear(params: ModelParams) -> None:
    # the linear system is well defined without noise, so sigma = 0 is allowed here
    errs = [e for e in validate(params) if not (params.sigma == 0 and e.startswith("sigma must"))]
    if errs:
        raise InvalidParams(errs)


def simulate_linearized(
    params: ModelParams, replicas: int, seed: int, horizon: Optional[float] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Terminal zbar(T) and z_1(T) across replicas (Euler, step params.dt)."""
    _check_linear(params)
    T = params.horizon if horizon is None else horizon
    n_steps = int(round(T / params.dt))
    n = params.n_agents
    kappa = params.theta + 2.0 * params.h
    dt, th = params.dt, params.theta
    amp = params.sigma * math.sqrt(dt)
    zbar_T = np.empty(replicas)
    z1_T = np.empty(replicas)
    batch = max(1, min(replicas, 2_000_000 // max(n * 50, 1)))
    for start in range(0, replicas, batch):
        stop = min(start + batch, replicas)
        rngs = [replica_generator(seed, r) for r in range(start, stop)]
        z = np.zeros((stop - start, n))
        done = 0
        while done < n_steps:
            c = min(50, n_steps - done)
            g = np.stack([r.standard_normal((c, n)) for r in rngs], axis=1)
            for k in range(c):
                zbar = z.mean(axis=1, keepdims=True)
                z = z - kappa * z * dt + th * zbar * dt + amp * g[k]
            done += c
        zbar_T[start:stop] = z.mean(axis=1)
        z1_T[start:stop] = z[:, 0]
    return zbar_T, z1_T


def validate_fluctuations(
    params: ModelParams, replicas: int, seed: int, horizon: Optional[float] = None
) -> FluctuationComparison:
    T = params.horizon if horizon is None else horizon
    rep = linearized_variances(params, T)
    notes = []
    if not rep.mean_noise_small:
        notes.append(f"sigma^2/N = {rep.stationary_mean:.3g} is not small; linearisation suspect")
    if not rep.agent_noise_small:
        notes.append(
            f"sigma^2/2(theta+2h) = {rep.stationary_agent:.3g} is not small; linearisation suspect"
        )
    for msg in notes:
        warnings.warn(msg, stacklevel=2)
    zbar, z1 = simulate_linearized(params, replicas, seed, T)
    vm, sem = _sample_var_se(zbar)
    va, sea = _sample_var_se(z1)
    return FluctuationComparison(rep, replicas, vm, va, sem, sea, notes)


def risk_comparison_report(grid: Iterable[dict]) -> list[dict]:
    """Individual versus systemic risk over parameter points.

    Each point needs keys h, theta, sigma, T, N.  Rows are sorted by the
    individual ratio sigma^2 / 2 theta and then by sigma, so consecutive rows
    with the same ratio show a fixed individual risk next to a falling
    systemic exponent N * rate.
    """
    rows = []
    for pt in grid:
        h, th, sig = float(pt["h"]), float(pt["theta"]), float(pt["sigma"])
        T, N = float(pt["T"]), int(pt["N"])
        p = ModelParams(h=h, theta=th, sigma=sig, n_agents=N, horizon=T, dt=min(0.02, 0.1 / max(th, 1.0)))
        xi0, xi1 = small_h_equilibrium(p)
        xi_b = xi0 + h * xi1
        rate = 2.0 * xi_b**2 / (sig**2 * T)
        rows.append(
            {
                "h": h,
                "theta": th,
                "sigma": sig,
                "T": T,
                "N": N,
                "individual_ratio": sig**2 / (2.0 * th),
                "individual_var": sig**2 / (2.0 * (th + 2.0 * h)),
                "xi_b": xi_b,
                "systemic_rate": rate,
                "exponent": N * rate,
                "p_transition": math.exp(-N * rate),
            }
        )
    rows.sort(key=lambda r: (round(r["individual_ratio"], 12), r["sigma"]))
    for prev, row in zip([None] + rows[:-1], rows):
        row["systemic_risk_rises"] = bool(
            prev is not None
            and math.isclose(prev["individual_ratio"], row["individual_ratio"], rel_tol=1e-9)
            and row["exponent"] < prev["exponent"]
        )
    return rows
