"""Parameter and state types for the bistable mean-field model.

Every agent follows

    dx_j = -h U(x_j) dt + theta (xbar - x_j) dt + sigma dw_j,   U(y) = y^3 - y,

so the single-agent potential is the quartic double well V(y) = y^4/4 - y^2/2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

# explicit Euler reliability guard: dt * max(theta, 1) may not exceed this
STABILITY_LIMIT = 0.2
DEFAULT_DT = 0.02


class InvalidParams(ValueError):
    """Raised when a parameter set violates one or more invariants.

    ``errors`` holds every violation, not only the first.
    """

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def force_U(y):
    """Restoring force of a single agent, U(y) = y^3 - y."""
    return y * y * y - y


def potential_V(y):
    """Double-well potential V(y) = y^4/4 - y^2/2, with V' = U."""
    y2 = y * y
    return 0.25 * y2 * y2 - 0.5 * y2


@dataclass(frozen=True)
class ModelParams:
    h: float
    theta: float
    sigma: float
    n_agents: int = 100
    horizon: float = 100.0
    dt: float = DEFAULT_DT

    @property
    def noise_to_reversion(self) -> float:
        """sigma^2 / (2 theta): the variance of one agent around the mean."""
        return self.sigma**2 / (2.0 * self.theta)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def replace(self, **changes) -> "ModelParams":
        d = self.to_dict()
        d.update(changes)
        return ModelParams(**d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "h": self.h,
            "theta": self.theta,
            "sigma": self.sigma,
            "n_agents": self.n_agents,
            "horizon": self.horizon,
            "dt": self.dt,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelParams":
        return cls(
            h=float(d["h"]),
            theta=float(d["theta"]),
            sigma=float(d["sigma"]),
            n_agents=int(d.get("n_agents", 100)),
            horizon=float(d.get("horizon", 100.0)),
            dt=float(d.get("dt", DEFAULT_DT)),
        )


@dataclass(frozen=True)
class GroupSpec:
    """K groups of agents with reversion rates ``thetas`` and population ``fractions``."""

    thetas: tuple[float, ...]
    fractions: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        object.__setattr__(self, "fractions", tuple(float(r) for r in self.fractions))

    @property
    def k(self) -> int:
        return len(self.thetas)

    def mean_theta(self) -> float:
        return math.fsum(r * t for r, t in zip(self.fractions, self.thetas))

    def to_list(self) -> list[dict[str, float]]:
        return [{"theta": t, "fraction": r} for t, r in zip(self.thetas, self.fractions)]

    @classmethod
    def from_list(cls, groups: Sequence[dict[str, Any]]) -> "GroupSpec":
        return cls(
            thetas=tuple(float(g["theta"]) for g in groups),
            fractions=tuple(float(g["fraction"]) for g in groups),
        )


@dataclass(frozen=True)
class HetModelParams:
    """Heterogeneous model: the per-agent theta is drawn from ``groups``."""

    h: float
    sigma: float
    groups: GroupSpec
    n_agents: int = 100
    horizon: float = 100.0
    dt: float = DEFAULT_DT

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def to_dict(self) -> dict[str, Any]:
        return {
            "h": self.h,
            "sigma": self.sigma,
            "n_agents": self.n_agents,
            "horizon": self.horizon,
            "dt": self.dt,
            "groups": self.groups.to_list(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HetModelParams":
        return cls(
            h=float(d["h"]),
            sigma=float(d["sigma"]),
            groups=GroupSpec.from_list(d["groups"]),
            n_agents=int(d.get("n_agents", 100)),
            horizon=float(d.get("horizon", 100.0)),
            dt=float(d.get("dt", DEFAULT_DT)),
        )


@dataclass
class SystemState:
    positions: np.ndarray
    time: float = 0.0

    def empirical_mean(self) -> float:
        return float(np.mean(self.positions))

    @property
    def n_agents(self) -> int:
        return len(self.positions)


def _finite(name: str, value, errors: list[str]) -> bool:
    try:
        ok = math.isfinite(value)
    except TypeError:
        ok = False
    if not ok:
        errors.append(f"{name} must be finite (got {value!r})")
    return ok


def validate_groups(groups: GroupSpec) -> list[str]:
    errors: list[str] = []
    if groups.k < 1:
        errors.append("groups must contain at least one group")
        return errors
    if len(groups.fractions) != groups.k:
        errors.append(
            f"groups: {groups.k} thetas but {len(groups.fractions)} fractions"
        )
        return errors
    for i, (t, r) in enumerate(zip(groups.thetas, groups.fractions)):
        if _finite(f"groups[{i}].theta", t, errors) and t <= 0:
            errors.append(f"groups[{i}].theta must be positive (got {t!r})")
        if _finite(f"groups[{i}].fraction", r, errors) and r <= 0:
            errors.append(f"groups[{i}].fraction must be positive (got {r!r})")
    total = math.fsum(groups.fractions)
    if abs(total - 1.0) > 1e-12:
        errors.append(f"groups: fractions must sum to 1 (got {total!r})")
    if len(set(groups.thetas)) != groups.k:
        errors.append(f"groups: thetas must be pairwise distinct (got {list(groups.thetas)})")
    return errors


def _validate_common(p, max_theta: float, errors: list[str]) -> None:
    if _finite("h", p.h, errors) and p.h < 0:
        errors.append(f"h must be nonnegative (got {p.h!r})")
    if _finite("sigma", p.sigma, errors) and p.sigma <= 0:
        errors.append(f"sigma must be positive (got {p.sigma!r})")
    if not isinstance(p.n_agents, (int, np.integer)) or p.n_agents < 1:
        errors.append(f"n_agents must be an integer >= 1 (got {p.n_agents!r})")
    horizon_ok = _finite("horizon", p.horizon, errors)
    if horizon_ok and p.horizon <= 0:
        errors.append(f"horizon must be positive (got {p.horizon!r})")
        horizon_ok = False
    if _finite("dt", p.dt, errors):
        if p.dt <= 0:
            errors.append(f"dt must be positive (got {p.dt!r})")
        else:
            if horizon_ok and p.dt >= p.horizon:
                errors.append(f"dt exceeds horizon (dt={p.dt!r}, horizon={p.horizon!r})")
            if math.isfinite(max_theta) and p.dt * max(max_theta, 1.0) > STABILITY_LIMIT + 1e-12:
                errors.append(
                    f"dt too large for explicit scheme: dt*max(theta,1)="
                    f"{p.dt * max(max_theta, 1.0):.6g} exceeds {STABILITY_LIMIT}"
                )


def validate(params) -> list[str]:
    """Return every invariant violation of ``params``; an empty list means valid."""
    errors: list[str] = []
    if isinstance(params, HetModelParams):
        group_errors = validate_groups(params.groups)
        errors.extend(group_errors)
        max_theta = max(params.groups.thetas) if params.groups.thetas else math.nan
        _validate_common(params, max_theta, errors)
        return errors
    if _finite("theta", params.theta, errors) and params.theta < 0:
        errors.append(f"theta must be nonnegative (got {params.theta!r})")
    _validate_common(params, params.theta, errors)
    return errors


def check(params) -> None:
    """Raise :class:`InvalidParams` listing all violations, if any."""
    errors = validate_groups(params) if isinstance(params, GroupSpec) else validate(params)
    if errors:
        raise InvalidParams(errors)


def params_from_json(d: dict[str, Any]):
    """Build homogeneous or heterogeneous params from their JSON object."""
    if "groups" in d:
        return HetModelParams.from_dict(d)
    return ModelParams.from_dict(d)
