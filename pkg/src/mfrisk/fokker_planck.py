"""Finite-volume solver for the nonlinear (McKean-Vlasov) Fokker-Planck equation

    u_t = h (U u)_y - theta ([int y u - y] u)_y + (sigma^2 / 2) u_yy

and its K-group version with a shared mean.

The drift is the gradient of Phi(y) = h V(y) + theta (y - m)^2 / 2, with m
the current mean.  Face fluxes use Scharfetter-Gummel exponential fitting,
an upwind-type flux that vanishes exactly on the sampled Gibbs density
exp(-2 Phi / sigma^2), so equilibria are stationary to round-off.  Edges are
no-flux.  Time stepping is explicit with substeps chosen so every cell keeps
a nonnegative update, which also makes the scheme positivity preserving.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import GroupSpec, ModelParams, potential_V

DEFAULT_DOMAIN = (-4.0, 4.0)
DEFAULT_CELLS = 800
MIN_SUBSTEP = 1e-9
LEAK_TOL = 1e-10
CLIP_BUDGET = 1e-10
_SAFETY = 0.9


class FokkerPlanckError(RuntimeError):
    pass


@dataclass
class DensityGrid:
    y_min: float
    y_max: float
    n_cells: int
    values: np.ndarray  # shape (n_cells,) or (K, n_cells)
    time: float = 0.0
    clipped_mass: float = field(default=0.0, repr=False)

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return self.y_min + (np.arange(self.n_cells) + 0.5) * self.dy

    def mass(self):
        return self.values.sum(axis=-1) * self.dy

    def moments(self) -> tuple:
        """(mean, second moment), per density when values is 2-D."""
        y = self.centers
        m1 = (self.values * y).sum(axis=-1) * self.dy
        m2 = (self.values * y * y).sum(axis=-1) * self.dy
        return m1, m2

    def reflected(self) -> "DensityGrid":
        if not math.isclose(self.y_min, -self.y_max):
            raise ValueError("reflection needs a symmetric domain")
        return DensityGrid(self.y_min, self.y_max, self.n_cells, self.values[..., ::-1].copy(), self.time)

    def l1_distance(self, other: "DensityGrid") -> float:
        return float(np.abs(self.values - other.values).sum() * self.dy)


def gaussian_grid(
    mean: float,
    var: float,
    domain: tuple[float, float] = DEFAULT_DOMAIN,
    n_cells: int = DEFAULT_CELLS,
) -> DensityGrid:
    g = DensityGrid(domain[0], domain[1], n_cells, np.empty(n_cells))
    y = g.centers
    u = np.exp(-((y - mean) ** 2) / (2.0 * var))
    g.values = u / (u.sum() * g.dy)
    return g


def equilibrium_grid(
    xi: float,
    params: ModelParams,
    domain: tuple[float, float] = DEFAULT_DOMAIN,
    n_cells: int = DEFAULT_CELLS,
    theta: Optional[float] = None,
) -> DensityGrid:
    """Cell-sampled equilibrium density centred at ``xi`` (optionally for a group theta)."""
    th = params.theta if theta is None else theta
    g = DensityGrid(domain[0], domain[1], n_cells, np.empty(n_cells))
    y = g.centers
    logu = -th * (y - xi) ** 2 / params.sigma**2 - 2.0 * params.h * potential_V(y) / params.sigma**2
    u = np.exp(logu - logu.max())
    g.values = u / (u.sum() * g.dy)
    return g


def _bernoulli(x: np.ndarray) -> np.ndarray:
    """B(x) = x / (e^x - 1), with B(0) = 1."""
    out = np.ones_like(x)
    nz = np.abs(x) > 1e-12
    out[nz] = x[nz] / np.expm1(x[nz])
    return out


def _coefficients(y: np.ndarray, dy: float, h: float, theta, mean: float, diff: float):
    """Face coefficients (a_plus, a_minus) with flux = a_plus*u_i - a_minus*u_{i+1}."""
    th = np.asarray(theta, dtype=float)[..., None]
    phi = h * potential_V(y) + 0.5 * th * (y - mean) ** 2
    pe = -(phi[..., 1:] - phi[..., :-1]) / diff  # face Peclet number v dy / D
    k = diff / (dy * dy)
    return k * _bernoulli(-pe), k * _bernoulli(pe)


def _check_leak(u: np.ndarray, dy: float, t: float) -> None:
    edge = max(float(np.max(u[..., 0])), float(np.max(u[..., -1]))) * dy
    if edge > LEAK_TOL:
        raise FokkerPlanckError(
            f"boundary leakage {edge:.3g} at t={t:.6g} exceeds {LEAK_TOL}; widen the domain"
        )


def _evolve(
    grid: DensityGrid,
    h: float,
    thetas,
    weights,
    sigma: float,
    t_end: float,
    record_times: Optional[Sequence[float]] = None,
):
    u = np.array(grid.values, dtype=float, copy=True)
    if u.ndim == 1:
        u = u[None, :]
    dy = grid.dy
    y = grid.centers
    w = np.asarray(weights, dtype=float)
    diff = 0.5 * sigma**2
    masses = u.sum(axis=-1) * dy
    if np.any(np.abs(masses - 1.0) > 1e-8):
        raise FokkerPlanckError(f"initial density not normalised (mass {masses})")
    _check_leak(u, dy, grid.time)
    t = grid.time
    t_stop = grid.time + t_end
    pending = sorted(record_times or [])
    snapshots = []
    clipped = 0.0
    while t < t_stop - 1e-14:
        mean = float(w @ (u * y).sum(axis=-1)) * dy
        ap, am = _coefficients(y, dy, h, thetas, mean, diff)
        out_rate = np.zeros_like(u)
        out_rate[:, :-1] += ap
        out_rate[:, 1:] += am
        dt_max = _SAFETY / float(out_rate.max())
        if dt_max < MIN_SUBSTEP:
            raise FokkerPlanckError(f"CFL substep {dt_max:.3g} below {MIN_SUBSTEP}")
        dt = min(dt_max, t_stop - t)
        if pending and pending[0] - t < dt:
            dt = max(pending[0] - t, 0.0)
        flux = ap * u[:, :-1] - am * u[:, 1:]
        du = np.zeros_like(u)
        du[:, :-1] -= flux
        du[:, 1:] += flux
        u = u + dt * du
        t += dt
        neg = u < 0
        if neg.any():
            low = float(u[neg].min())
            if low < -1e-12:
                raise FokkerPlanckError(f"negative density {low:.3g} at t={t:.6g}")
            lost = float(-u[neg].sum()) * dy
            if lost > CLIP_BUDGET:
                raise FokkerPlanckError(f"clipping mass {lost:.3g} exceeds budget")
            clipped += lost
            u[neg] = 0.0
            u /= (u.sum(axis=-1, keepdims=True) * dy)
        if pending and abs(t - pending[0]) < 1e-12:
            _check_leak(u, dy, t)
            snapshots.append(_wrap(grid, u, t, clipped))
            pending.pop(0)
    _check_leak(u, dy, t)
    return _wrap(grid, u, t, clipped), snapshots


def _wrap(grid: DensityGrid, u: np.ndarray, t: float, clipped: float) -> DensityGrid:
    vals = u[0].copy() if np.ndim(grid.values) == 1 else u.copy()
    return DensityGrid(grid.y_min, grid.y_max, grid.n_cells, vals, t, clipped)


def evolve_fp(
    initial: DensityGrid,
    params: ModelParams,
    t_end: float,
    record_times: Optional[Sequence[float]] = None,
):
    """Advance the homogeneous density by ``t_end``.

    Returns the final grid; with ``record_times`` (absolute times) returns
    ``(final, snapshots)``.
    """
    final, snaps = _evolve(initial, params.h, [params.theta], [1.0], params.sigma, t_end, record_times)
    return (final, snaps) if record_times is not None else final


def evolve_fp_system(
    initials: DensityGrid,
    groups: GroupSpec,
    sigma: float,
    h: float,
    t_end: float,
    record_times: Optional[Sequence[float]] = None,
):
    """Coupled K-group system; ``initials.values`` has shape (K, n_cells)."""
    vals = np.asarray(initials.values)
    if vals.ndim != 2 or vals.shape[0] != groups.k:
        raise ValueError(f"need a ({groups.k}, n_cells) array of initial densities")
    final, snaps = _evolve(
        initials, h, list(groups.thetas), list(groups.fractions), sigma, t_end, record_times
    )
    return (final, snaps) if record_times is not None else final


def stack_grids(grids: Sequence[DensityGrid]) -> DensityGrid:
    g0 = grids[0]
    return DensityGrid(g0.y_min, g0.y_max, g0.n_cells, np.stack([g.values for g in grids]), g0.time)
