"""Collective equilibria of the mean-field limit.

The stationary one-agent density centred at xi is a Gaussian of variance
s = sigma^2 / (2 theta) tilted by exp(-2 h V(y) / sigma^2).  Equilibria are
the fixed points of the consistency map m(xi), the mean of that density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .model import GroupSpec, HetModelParams, ModelParams, check, potential_V

GH_NODES = 64
GH_MAX_NODES = 2048
GH_TOL = 1e-9
ROOT_BRACKET = 1.5
FIXED_POINT_TOL = 1e-10


class QuadratureError(RuntimeError):
    pass


class EquilibriumError(RuntimeError):
    pass


@dataclass(frozen=True)
class EquilibriumSolution:
    xi_b: float
    xi_small_h: Optional[tuple[float, float]]
    sigma_c: float
    bistable: bool
    method: str  # "fixed-point" | "small-h-expansion"
    residual: float = 0.0

    def to_dict(self) -> dict:
        xi0, xi1 = self.xi_small_h if self.xi_small_h is not None else (None, None)
        return {
            "xi_b": self.xi_b,
            "xi0": xi0,
            "xi1": xi1,
            "sigma_c": self.sigma_c,
            "bistable": self.bistable,
            "method": self.method,
            "residual": self.residual,
        }


@lru_cache(maxsize=None)
def _nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = hermegauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _tilted_moments(xi: float, var: float, h: float, sigma: float, n: int) -> tuple[float, float]:
    """First and second moments of N(xi, var) tilted by exp(-2hV/sigma^2)."""
    x, w = _nodes(n)
    y = xi + math.sqrt(var) * x
    logw = -2.0 * h * potential_V(y) / sigma**2
    wt = w * np.exp(logw - logw.max())
    z = wt.sum()
    m1 = (wt * y).sum() / z
    m2 = (wt * y * y).sum() / z
    return float(m1), float(m2)


def _converged_moments(xi: float, var: float, h: float, sigma: float) -> tuple[float, float]:
    n = GH_NODES
    prev = _tilted_moments(xi, var, h, sigma, n)
    while n < GH_MAX_NODES:
        n *= 2
        cur = _tilted_moments(xi, var, h, sigma, n)
        if abs(cur[0] - prev[0]) < GH_TOL and abs(cur[1] - prev[1]) < GH_TOL:
            return cur
        prev = cur
    raise QuadratureError(
        f"Gauss-Hermite quadrature did not converge at xi={xi!r} with {n} nodes"
    )


def _group_vars(groups: GroupSpec, sigma: float) -> list[tuple[float, float]]:
    return [(r, sigma**2 / (2.0 * t)) for t, r in zip(groups.thetas, groups.fractions)]


def consistency_map(xi: float, params: ModelParams) -> float:
    """m(xi): mean of the equilibrium density centred at ``xi``."""
    if params.theta <= 0:
        raise ValueError("consistency map needs theta > 0")
    return _converged_moments(xi, params.noise_to_reversion, params.h, params.sigma)[0]


def consistency_map_div(xi: float, groups: GroupSpec, sigma: float, h: float) -> float:
    """Population-weighted consistency map of the K-group model."""
    return math.fsum(
        r * _converged_moments(xi, var, h, sigma)[0] for r, var in _group_vars(groups, sigma)
    )


def consistency_slope(xi: float, params: ModelParams) -> float:
    """dm/dxi at ``xi`` via the covariance identity: Var(y) / s."""
    s = params.noise_to_reversion
    m1, m2 = _converged_moments(xi, s, params.h, params.sigma)
    return (m2 - m1 * m1) / s


def consistency_slope_at_zero(params: ModelParams) -> float:
    return consistency_slope(0.0, params)


def _consistency_slope_div(xi: float, groups: GroupSpec, sigma: float, h: float) -> float:
    total = []
    for r, var in _group_vars(groups, sigma):
        m1, m2 = _converged_moments(xi, var, h, sigma)
        total.append(r * (m2 - m1 * m1) / var)
    return math.fsum(total)


def equilibrium_density(
    xi: float,
    params: ModelParams,
    half_width: Optional[float] = None,
    n_points: int = 4001,
    theta: Optional[float] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Equilibrium density u^e_xi on a uniform grid over [-L, L].

    Normalised so that the trapezoid integral over the grid is one.  Raises
    ``ValueError`` if the grid is narrower than xi + 6 standard deviations or
    misses more than 1e-8 of the mass.  ``theta`` overrides ``params.theta``
    (used for the group densities of the heterogeneous model).
    """
    th = params.theta if theta is None else theta
    var = params.sigma**2 / (2.0 * th)
    min_width = abs(xi) + 6.0 * math.sqrt(var)
    L = max(min_width, 4.0) if half_width is None else half_width
    if L < min_width:
        raise ValueError(f"grid too narrow: half width {L} < {min_width:.6g}")
    y = np.linspace(-L, L, n_points)
    logu = -((y - xi) ** 2) / (2.0 * var) - 2.0 * params.h * potential_V(y) / params.sigma**2
    shift = logu.max()
    u = np.exp(logu - shift)
    z_grid = np.trapezoid(u, y)

    # full-line normaliser with the same shift, from Gauss-Hermite
    x, w = _nodes(256)
    yq = xi + math.sqrt(var) * x
    logq = -2.0 * params.h * potential_V(yq) / params.sigma**2
    # sum(w) = sqrt(2 pi) for probabilists' Hermite weights
    z_full = math.sqrt(var) * float((w * np.exp(logq + (-shift))).sum())
    tail = 1.0 - z_grid / z_full
    if tail > 1e-8:
        raise ValueError(f"grid too narrow: tail mass {tail:.3g} outside [-{L}, {L}]")
    return y, u / z_grid


def critical_sigma_small_h(theta: float, h: float = 0.0) -> float:
    """Leading-order critical noise sqrt(2 theta / 3); the O(h) term is unknown."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    return math.sqrt(2.0 * theta / 3.0)


def small_h_equilibrium(params: ModelParams) -> tuple[float, float]:
    """Coefficients (xi0, xi1) of xi_b = xi0 + h xi1 + O(h^2)."""
    return _small_h_coefficients(params.sigma, params.theta)


def _small_h_coefficients(sigma: float, theta: float) -> tuple[float, float]:
    s = sigma**2 / (2.0 * theta)
    if 3.0 * s >= 1.0:
        raise EquilibriumError(
            f"no bistable equilibria: 3 sigma^2 / (2 theta) = {3.0 * s:.6g} >= 1"
        )
    xi0 = math.sqrt(1.0 - 3.0 * s)
    xi1 = xi0 * (6.0 / sigma**2) * s * s * (1.0 - 2.0 * s) / (1.0 - 3.0 * s)
    return xi0, xi1


def critical_sigma_div(groups: GroupSpec, h: float = 0.0) -> float:
    check(groups)
    num = math.fsum(r / t for t, r in zip(groups.thetas, groups.fractions))
    den = math.fsum(3.0 * r / (2.0 * t * t) for t, r in zip(groups.thetas, groups.fractions))
    return math.sqrt(num / den)


def small_h_equilibrium_div(groups: GroupSpec, sigma: float) -> float:
    """Leading-order xi_b of the K-group model."""
    check(groups)
    sc = critical_sigma_div(groups)
    if sigma >= sc:
        raise EquilibriumError(f"no bistable equilibria: sigma={sigma} >= sigma_c^div={sc:.6g}")
    num = math.fsum(
        (r / t) * (1.0 - 3.0 * sigma**2 / (2.0 * t)) for t, r in zip(groups.thetas, groups.fractions)
    )
    den = math.fsum(r / t for t, r in zip(groups.thetas, groups.fractions))
    return math.sqrt(num / den)


def _positive_root(m, dm, lo: float = 0.0, hi: float = ROOT_BRACKET) -> tuple[float, float]:
    """Root of m(xi) - xi on (lo, hi] with m(xi) > xi just above lo.

    Bisection to a coarse tolerance, then Newton until |xi - m(xi)| < 1e-10.
    """
    grid = np.linspace(lo, hi, 151)[1:]
    f = [m(x) - x for x in grid]
    a = b = None
    for i in range(len(grid) - 1):
        if f[i] > 0 and f[i + 1] <= 0:
            a, b = grid[i], grid[i + 1]
            fa = f[i]
            break
    if a is None:
        if f[0] <= 0:
            # root lies below the first scan point; refine toward lo
            a, b = lo + (grid[0] - lo) * 1e-6, grid[0]
            fa = m(a) - a
            if fa <= 0:
                raise EquilibriumError("no sign change of m(xi) - xi near zero despite slope > 1")
        else:
            raise EquilibriumError(f"no sign change of m(xi) - xi on (0, {hi}]")
    while b - a > 1e-6:
        c = 0.5 * (a + b)
        fc = m(c) - c
        if fc > 0:
            a, fa = c, fc
        else:
            b = c
    xi = 0.5 * (a + b)
    for _ in range(50):
        r = m(xi) - xi
        if abs(r) < FIXED_POINT_TOL:
            return xi, abs(r)
        step = r / (1.0 - dm(xi))
        xi_new = xi + step
        if not (a - 1e-3 <= xi_new <= b + 1e-3):
            xi_new = 0.5 * (a + b)
        xi = xi_new
    r = m(xi) - xi
    if abs(r) < FIXED_POINT_TOL:
        return xi, abs(r)
    raise EquilibriumError(f"Newton refinement stalled with residual {r:.3g}")


def solve_bistable(params: ModelParams, negative: bool = False) -> EquilibriumSolution:
    """Positive (or, with ``negative``, negative) nonzero root of xi = m(xi)."""
    check(params)
    if params.h == 0:
        raise EquilibriumError("degenerate at h=0; use expansion (small_h_equilibrium)")
    try:
        small = small_h_equilibrium(params)
    except EquilibriumError:
        small = None
    sigma_c = critical_sigma_small_h(params.theta, params.h)
    if consistency_slope_at_zero(params) <= 1.0:
        return EquilibriumSolution(0.0, small, sigma_c, False, "fixed-point", 0.0)
    sign = -1.0 if negative else 1.0
    xi, res = _positive_root(
        lambda x: sign * consistency_map(sign * x, params),
        lambda x: consistency_slope(sign * x, params),
    )
    return EquilibriumSolution(sign * xi, small, sigma_c, True, "fixed-point", res)


def solve_bistable_div(params: HetModelParams) -> EquilibriumSolution:
    check(params)
    if params.h == 0:
        raise EquilibriumError("degenerate at h=0; use expansion (small_h_equilibrium_div)")
    g, sigma, h = params.groups, params.sigma, params.h
    sigma_c = critical_sigma_div(g, h)
    small = None
    if g.k == 1:
        try:
            small = _small_h_coefficients(sigma, g.thetas[0])
        except EquilibriumError:
            pass
    if _consistency_slope_div(0.0, g, sigma, h) <= 1.0:
        return EquilibriumSolution(0.0, small, sigma_c, False, "fixed-point", 0.0)
    xi, res = _positive_root(
        lambda x: consistency_map_div(x, g, sigma, h),
        lambda x: _consistency_slope_div(x, g, sigma, h),
    )
    return EquilibriumSolution(xi, small, sigma_c, True, "fixed-point", res)


def expansion_solution(params: ModelParams) -> EquilibriumSolution:
    """Equilibrium from the small-h expansion only (valid at h = 0 too)."""
    xi0, xi1 = small_h_equilibrium(params)
    return EquilibriumSolution(
        xi0 + params.h * xi1,
        (xi0, xi1),
        critical_sigma_small_h(params.theta, params.h),
        True,
        "small-h-expansion",
    )


def equilibrium_xi_b(params: ModelParams) -> float:
    """xi_b from the fixed-point solver when h > 0, else the h = 0 value xi0."""
    if params.h == 0:
        return small_h_equilibrium(params)[0]
    sol = solve_bistable(params)
    if not sol.bistable:
        raise EquilibriumError("parameters are not in the bistable regime")
    return sol.xi_b


def empirical_critical_sigma(
    theta: float, h: float, lo: float, hi: float, tol: float = 1e-4
) -> float:
    """Noise level where solve_bistable's verdict flips, by bisection on sigma."""

    def bistable(sig: float) -> bool:
        p = ModelParams(h=h, theta=theta, sigma=sig, dt=min(0.01, 0.1 / max(theta, 1.0)))
        return consistency_slope_at_zero(p) > 1.0

    if not bistable(lo) or bistable(hi):
        raise EquilibriumError(f"[{lo}, {hi}] does not bracket the bistability flip")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if bistable(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
