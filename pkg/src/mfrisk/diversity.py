"""h = 0 analysis of diversity in the reversion rates.

With K groups the partial averages obey the linear system
dX = M X dt + sigma/sqrt(N) R^{-1/2} dW, whose uniform vector spans the null
space of M.  The variance of xbar(T) = rho^T X(T) sets the transition
probability p_T ~ exp(-2 xi_b^2 / sigma_T^2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.linalg import expm

from .equilibrium import EquilibriumError, small_h_equilibrium_div
from .model import GroupSpec, check


@dataclass(frozen=True)
class DiversityMatrices:
    rho: np.ndarray
    M: np.ndarray
    R: np.ndarray


@dataclass(frozen=True)
class DiversityPerturbation:
    """theta_k = theta_bar (1 + delta alpha_k) with sum_k rho_k alpha_k = 0."""

    theta_bar: float
    alphas: tuple[float, ...]
    fractions: tuple[float, ...]
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "fractions", tuple(float(r) for r in self.fractions))
        drift = math.fsum(r * a for r, a in zip(self.fractions, self.alphas))
        if abs(drift) >= 1e-12:
            raise ValueError(f"sum rho_k alpha_k must vanish (got {drift:.3g})")
        if any(t <= 0 for t in self.thetas()):
            raise ValueError("perturbed thetas must stay positive")

    def thetas(self) -> tuple[float, ...]:
        return tuple(self.theta_bar * (1.0 + self.delta * a) for a in self.alphas)

    def spread(self) -> float:
        """sum_k rho_k alpha_k^2."""
        return math.fsum(r * a * a for r, a in zip(self.fractions, self.alphas))

    def groups(self) -> GroupSpec:
        if self.delta == 0:
            return GroupSpec((self.theta_bar,), (1.0,))
        return GroupSpec(self.thetas(), self.fractions)


def build_matrices(groups: GroupSpec) -> DiversityMatrices:
    check(groups)
    rho = np.asarray(groups.fractions, dtype=float)
    th = np.asarray(groups.thetas, dtype=float)
    M = -th[:, None] * (np.eye(groups.k) - rho[None, :])
    R = np.diag(rho)
    # each row of M sums to -theta_i (1 - sum rho) = 0 up to rounding of sum rho
    null = M @ np.ones(groups.k)
    if np.max(np.abs(null)) > 1e-12 * max(1.0, float(th.max())):
        raise AssertionError(f"uniform vector not in the null space of M: {null}")
    return DiversityMatrices(rho, M, R)


def sigma_T_squared(groups: GroupSpec, sigma: float, n_agents: int, horizon: float) -> float:
    """Var xbar(T) = (sigma^2/N) int_0^T rho^T e^{Ms} R^{-1} e^{M^T s} rho ds."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    mats = build_matrices(groups)
    if groups.k == 1:
        return sigma**2 * horizon / n_agents
    rinv = 1.0 / mats.rho

    def integrand(s: float) -> float:
        v = mats.rho @ expm(mats.M * s)
        return float(v @ (rinv * v))

    val, err = quad(integrand, 0.0, horizon, epsabs=0.0, epsrel=1e-10, limit=200)
    if not math.isfinite(val) or err > 1e-8 * abs(val):
        raise RuntimeError(f"sigma_T^2 quadrature did not converge (estimate {err:.3g})")
    return sigma**2 / n_agents * val


@dataclass(frozen=True)
class DiverseProbability:
    p: float
    log_p: float
    xi_b: float
    sigma_T2: float


def transition_probability_diverse(
    groups: GroupSpec, sigma: float, n_agents: int, horizon: float
) -> DiverseProbability:
    """p_T ~ exp(-2 xi_b^2 / sigma_T^2) with the leading-order K-group xi_b."""
    try:
        xi_b = small_h_equilibrium_div(groups, sigma)
    except EquilibriumError as exc:
        raise EquilibriumError(f"non-bistable regime: {exc}") from exc
    s2 = sigma_T_squared(groups, sigma, n_agents, horizon)
    log_p = -2.0 * xi_b**2 / s2
    return DiverseProbability(math.exp(log_p), log_p, xi_b, s2)


def relaxation_average(theta_bar: float, horizon: float) -> float:
    """(1/T) int_0^T (1 - e^{-theta s})^2 ds in closed form."""
    t, T = theta_bar, horizon
    integral = T - 2.0 * (-math.expm1(-t * T)) / t + (-math.expm1(-2.0 * t * T)) / (2.0 * t)
    return integral / T


@dataclass(frozen=True)
class DiversityExpansion:
    xi_b2: float
    sigma_T2: float
    log_p: float


def diversity_expansion(
    pert: DiversityPerturbation,
    sigma: float,
    n_agents: int,
    horizon: float,
    corrected: bool = False,
) -> DiversityExpansion:
    """delta^2-truncated xi_b^2, sigma_T^2 and log p_T.

    The default reproduces the reference expansion.  ``corrected=True``
    returns the Taylor coefficients of the exact closed forms instead:
    xi_b^2 loses 2 delta^2 A (3 sigma^2 / 2 theta_bar), and the log p_T
    bracket multiplies the relaxation average by xi0^2.  (A = sum rho alpha^2.)
    """
    s3 = 3.0 * sigma**2 / (2.0 * pert.theta_bar)
    if s3 >= 1.0:
        raise EquilibriumError(f"non-bistable regime: 3 sigma^2 / 2 theta_bar = {s3:.6g}")
    d2a = pert.delta**2 * pert.spread()
    j = relaxation_average(pert.theta_bar, horizon)
    base_var = sigma**2 * horizon / n_agents
    s_t2 = base_var * (1.0 + d2a * j)
    pref = 2.0 * n_agents / (sigma**2 * horizon)
    if corrected:
        xi2 = (1.0 - s3) - 2.0 * d2a * s3
        log_p = -pref * ((1.0 - s3) - d2a * (2.0 * s3 + (1.0 - s3) * j))
    else:
        xi2 = (1.0 - s3) - d2a * s3
        log_p = -pref * ((1.0 - s3) - d2a * (s3 + j))
    return DiversityExpansion(xi2, s_t2, log_p)


def diversity_scan(
    theta_bar: float,
    alphas,
    fractions,
    sigma: float,
    n_agents: int,
    horizon: float,
    deltas,
) -> list[dict]:
    """Exact and expanded values side by side for each delta."""
    rows = []
    for d in deltas:
        pert = DiversityPerturbation(theta_bar, tuple(alphas), tuple(fractions), float(d))
        g = pert.groups()
        exact = transition_probability_diverse(g, sigma, n_agents, horizon)
        exp_ = diversity_expansion(pert, sigma, n_agents, horizon)
        rows.append(
            {
                "delta": float(d),
                "xi_b2_exact": exact.xi_b**2,
                "xi_b2_exp": exp_.xi_b2,
                "sigmaT2_exact": exact.sigma_T2,
                "sigmaT2_exp": exp_.sigma_T2,
                "log_pT_exact": exact.log_p,
                "log_pT_exp": exp_.log_p,
            }
        )
    return rows
