"""Rate functions for the systemic transition -xi_b -> +xi_b over [0, T].

Four routes to the same number at small h:

* closed forms at h = 0 and to first order in h;
* minimisation of the reduced one-dimensional action
  (1/2 sigma^2) int (a' + h b(a))^2 dt, b(a) = a^3 + (3 s - 1) a, s = sigma^2 / 2 theta;
* the Euler-Lagrange boundary-value problem for that action, by shooting;
* the driving-force cost of a Gaussian density path with mean a(t) and
  variance s, whose force is -a' - h(y^3 - y).

Throughout the integrand sign is (a' + h b(a)); the probability of the
transition is then approximately exp(-N * rate).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import solve_banded

from .equilibrium import EquilibriumError, equilibrium_xi_b, small_h_equilibrium
from .model import ModelParams

DEFAULT_GRID = 2000
NEWTON_MAX_ITER = 200
GRAD_TOL = 1e-10


class ConvergenceError(RuntimeError):
    pass


@dataclass
class MeanPath:
    times: np.ndarray
    values: np.ndarray

    @classmethod
    def linear(cls, xi: float, horizon: float, grid: int = DEFAULT_GRID) -> "MeanPath":
        t = np.linspace(0.0, horizon, grid + 1)
        a = -xi + 2.0 * xi * t / horizon
        a[0], a[-1] = -xi, xi
        return cls(t, a)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass
class RateEstimate:
    value: float
    method: str  # h0-closed-form | small-h-closed-form | reduced-minimization | gaussian-path | bvp
    path: Optional[MeanPath] = None
    iterations: int = 0
    residual: float = 0.0

    def implied_log_probability(self, n_agents: int) -> float:
        return -n_agents * self.value


def _require_bistable(params: ModelParams) -> float:
    s = params.noise_to_reversion
    if 3.0 * s >= 1.0:
        raise EquilibriumError(f"non-bistable regime: 3 sigma^2 / 2 theta = {3 * s:.6g} >= 1")
    return s


def reduced_drift(a, params: ModelParams):
    """b(a) = a^3 + (3 sigma^2/2theta - 1) a; the reduced dynamics is a' = -h b(a)."""
    c = 3.0 * params.noise_to_reversion - 1.0
    return a * a * a + c * a


def rate_h0(xi0: float, sigma: float, horizon: float) -> float:
    """Minimal cost at h = 0: 2 xi0^2 / (sigma^2 T)."""
    if horizon <= 0 or sigma <= 0:
        raise ValueError("need horizon > 0 and sigma > 0")
    return 2.0 * xi0 * xi0 / (sigma * sigma * horizon)


def rate_small_h(params: ModelParams, horizon: Optional[float] = None) -> float:
    """(2 xi0 / sigma^2 T)(xi0 + 2 h xi1), correct through first order in h."""
    T = params.horizon if horizon is None else horizon
    _require_bistable(params)
    xi0, xi1 = small_h_equilibrium(params)
    return 2.0 * xi0 / (params.sigma**2 * T) * (xi0 + 2.0 * params.h * xi1)


def reduced_rate_functional(path: MeanPath, params: ModelParams) -> float:
    """Trapezoid rule per grid interval with the forward-difference slope."""
    a = np.asarray(path.values, dtype=float)
    dt = np.diff(path.times)
    slope = np.diff(a) / dt
    hb = params.h * reduced_drift(a, params)
    r1 = slope + hb[:-1]
    r2 = slope + hb[1:]
    return float(np.sum(0.5 * dt * (r1 * r1 + r2 * r2)) / (2.0 * params.sigma**2))


def _gradient_hessian(a: np.ndarray, dt: float, params: ModelParams):
    """Gradient and tridiagonal Hessian of the discrete reduced functional."""
    h = params.h
    c = 3.0 * params.noise_to_reversion - 1.0
    b = a * a * a + c * a
    db = 3.0 * a * a + c
    d2b = 6.0 * a
    w = 1.0 / (2.0 * params.sigma**2)
    slope = np.diff(a) / dt
    r1 = slope + h * b[:-1]
    r2 = slope + h * b[1:]
    inv = 1.0 / dt
    p = -inv + h * db[:-1]  # d r1 / d a_k
    q = inv + h * db[1:]  # d r2 / d a_{k+1}
    # per interval k: f = w dt/2 (r1^2 + r2^2)
    gl = w * dt * (r1 * p + r2 * (-inv))  # d f / d a_k
    gr = w * dt * (r1 * inv + r2 * q)  # d f / d a_{k+1}
    n = a.size
    grad = np.zeros(n)
    grad[:-1] += gl
    grad[1:] += gr
    hll = w * dt * (p * p + r1 * h * d2b[:-1] + inv * inv)
    hrr = w * dt * (inv * inv + q * q + r2 * h * d2b[1:])
    hlr = w * dt * (p * inv + (-inv) * q)
    diag = np.zeros(n)
    diag[:-1] += hll
    diag[1:] += hrr
    return grad, diag, hlr


def euler_lagrange_residual(path: MeanPath, params: ModelParams) -> float:
    """Infinity norm of the discrete Euler-Lagrange equations at interior nodes."""
    grad, _, _ = _gradient_hessian(np.asarray(path.values, dtype=float), path.dt, params)
    return float(np.max(np.abs(grad[1:-1]))) / path.dt


def minimize_reduced(
    params: ModelParams,
    horizon: Optional[float] = None,
    grid_size: int = DEFAULT_GRID,
    xi_b: Optional[float] = None,
) -> RateEstimate:
    """Damped Newton on the interior path values, endpoints pinned at -/+ xi_b."""
    T = params.horizon if horizon is None else horizon
    _require_bistable(params)
    xi = equilibrium_xi_b(params) if xi_b is None else xi_b
    path = MeanPath.linear(xi, T, grid_size)
    a = path.values.copy()
    dt = path.dt
    f = reduced_rate_functional(MeanPath(path.times, a), params)
    for it in range(1, NEWTON_MAX_ITER + 1):
        grad, diag, off = _gradient_hessian(a, dt, params)
        g = grad[1:-1]
        el = float(np.max(np.abs(g))) if g.size else 0.0
        if el < GRAD_TOL and el / dt < GRAD_TOL:
            return RateEstimate(f, "reduced-minimization", MeanPath(path.times, a), it - 1, el / dt)
        ab = np.zeros((3, g.size))
        ab[0, 1:] = off[1:-1]
        ab[1] = diag[1:-1]
        ab[2, :-1] = off[1:-1]
        step = solve_banded((1, 1), ab, -g)
        lam = 1.0
        for _ in range(30):
            trial = a.copy()
            trial[1:-1] += lam * step
            ft = reduced_rate_functional(MeanPath(path.times, trial), params)
            if ft <= f + 1e-15 * max(1.0, abs(f)):
                break
            lam *= 0.5
        a, f = trial, ft
    grad, _, _ = _gradient_hessian(a, dt, params)
    res = float(np.max(np.abs(grad[1:-1])))
    raise ConvergenceError(
        f"reduced minimisation did not converge in {NEWTON_MAX_ITER} iterations "
        f"(gradient inf-norm {res:.3g})"
    )


def optimal_path_bvp(
    params: ModelParams,
    horizon: Optional[float] = None,
    grid_size: int = DEFAULT_GRID,
    xi_b: Optional[float] = None,
) -> MeanPath:
    """Shooting on a'(0) for a'' = h^2 b(a) b'(a), a(0) = -xi_b, a(T) = xi_b."""
    T = params.horizon if horizon is None else horizon
    _require_bistable(params)
    xi = equilibrium_xi_b(params) if xi_b is None else xi_b
    h2 = params.h**2
    c = 3.0 * params.noise_to_reversion - 1.0
    t_eval = np.linspace(0.0, T, grid_size + 1)

    def rhs(t, y):
        a, v = y
        return [v, h2 * (a**3 + c * a) * (3.0 * a * a + c)]

    def blowup(t, y):
        return 10.0 - abs(y[0])

    blowup.terminal = True

    def shoot(v0: float, dense: bool = False):
        sol = solve_ivp(
            rhs, (0.0, T), [-xi, v0], method="DOP853", rtol=1e-12, atol=1e-13,
            t_eval=t_eval if dense else None, events=blowup,
        )
        if sol.status == 1:  # escaped; report a signed large miss
            return math.copysign(1e3, sol.y[0, -1]), sol
        return sol.y[0, -1] - xi, sol

    v_lin = 2.0 * xi / T
    lo, hi = v_lin, v_lin
    f_lo, _ = shoot(lo)
    f_hi = f_lo
    factor = 0.5
    for _ in range(60):
        if f_lo < 0 < f_hi or f_hi < 0 < f_lo:
            break
        if f_lo >= 0:
            lo = lo - factor * abs(v_lin)
            f_lo, _ = shoot(lo)
        if f_hi <= 0:
            hi = hi + factor * abs(v_lin)
            f_hi, _ = shoot(hi)
        factor *= 1.5
    else:
        raise ConvergenceError("shooting bracket for a'(0) not found")
    if f_lo == 0:
        hi, f_hi = lo, f_lo
    # bisection-secant (Illinois) on the endpoint miss
    v = hi
    for _ in range(200):
        v = hi - f_hi * (hi - lo) / (f_hi - f_lo)
        if not (min(lo, hi) < v < max(lo, hi)):
            v = 0.5 * (lo + hi)
        fv, _ = shoot(v)
        if abs(fv) < 1e-11:
            break
        if (fv < 0) == (f_lo < 0):
            lo, f_lo = v, fv
            f_hi *= 0.5
        else:
            hi, f_hi = v, fv
            f_lo *= 0.5
    fv, sol = shoot(v, dense=True)
    if abs(fv) >= 1e-9:
        raise ConvergenceError(f"shooting stalled with endpoint miss {fv:.3g}")
    values = sol.y[0].copy()
    values[0], values[-1] = -xi, xi
    return MeanPath(t_eval, values)


def gaussian_mean_moments(a, var):
    """E(y^3 - y) and E(y^3 - y)^2 for y ~ N(a, var), via central moments."""
    m2, m4, m6 = var, 3.0 * var**2, 15.0 * var**3
    mean = a**3 + 3.0 * var * a - a
    # y^3 - y = (a^3 - a) + (3a^2 - 1) z + 3a z^2 + z^3 with z centred
    c0 = a**3 - a
    c1 = 3.0 * a * a - 1.0
    c2 = 3.0 * a
    second = (
        c0 * c0
        + (c1 * c1 + 2.0 * c0 * c2) * m2
        + (c2 * c2 + 2.0 * c1) * m4
        + m6
    )
    return mean, second


def gaussian_path_rate(path: MeanPath, params: ModelParams) -> float:
    """Driving-force cost of the Gaussian density path with mean ``path``.

    Evaluates (1/2 sigma^2) int E_{N(a, s)} (a' + h (y^3 - y))^2 dt with the
    same interval quadrature as :func:`reduced_rate_functional`.
    """
    a = np.asarray(path.values, dtype=float)
    dt = np.diff(path.times)
    slope = np.diff(a) / dt
    mean, second = gaussian_mean_moments(a, params.noise_to_reversion)
    h = params.h

    def cost(k):
        return slope * slope + 2.0 * h * slope * mean[k] + h * h * second[k]

    lhs = cost(slice(None, -1))
    rhs = cost(slice(1, None))
    return float(np.sum(0.5 * dt * (lhs + rhs)) / (2.0 * params.sigma**2))


@dataclass(frozen=True)
class TransitionProbability:
    p: float
    log_p: float


def transition_probability_ld(rate, n_agents: int) -> TransitionProbability:
    """exp(-N * rate), with the log kept to avoid underflow."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    value = rate.value if isinstance(rate, RateEstimate) else float(rate)
    log_p = -n_agents * value
    return TransitionProbability(math.exp(log_p), log_p)


def estimate_rate(
    params: ModelParams, method: str, horizon: Optional[float] = None, grid: int = DEFAULT_GRID
) -> RateEstimate:
    """Dispatch to one of the rate routes by name."""
    T = params.horizon if horizon is None else horizon
    if method == "h0":
        xi0 = small_h_equilibrium(params)[0]
        return RateEstimate(rate_h0(xi0, params.sigma, T), "h0-closed-form")
    if method == "small-h":
        return RateEstimate(rate_small_h(params, T), "small-h-closed-form")
    if method == "minimize":
        return minimize_reduced(params, T, grid)
    if method == "bvp":
        path = optimal_path_bvp(params, T, grid)
        return RateEstimate(reduced_rate_functional(path, params), "bvp", path)
    if method == "gaussian-path":
        path = minimize_reduced(params, T, grid).path
        return RateEstimate(gaussian_path_rate(path, params), "gaussian-path", path)
    raise ValueError(f"unknown rate method {method!r}")
