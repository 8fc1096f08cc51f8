"""Parameter regimes for the trajectory figures.

Every value used by ``mfrisk figures`` lives here.  Each regime varies one
parameter over three values: below, at and above the bistability criterion
3 sigma^2 / 2 theta = 1 for the sigma and theta sweeps, and low, mid and high
otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .equilibrium import EquilibriumError, critical_sigma_div
from .model import GroupSpec, HetModelParams, ModelParams
from .simulate import SimulationError, rng_metadata, run_ensemble, simulate_replica

HET_GROUPS = GroupSpec((5.0, 15.0), (0.5, 0.5))


@dataclass(frozen=True)
class Regime:
    name: str
    axis: str
    labels: tuple[str, ...]
    points: tuple  # ModelParams or HetModelParams
    note: str = ""
    values: tuple[float, ...] = field(default=())


def _homog(axis: str, values, **base) -> tuple:
    out = []
    for v in values:
        kw = dict(base)
        kw[axis] = v
        out.append(ModelParams(**kw))
    return tuple(out)


def _het(axis: str, values, groups=HET_GROUPS, **base) -> tuple:
    out = []
    for v in values:
        kw = dict(base)
        if axis == "groups":
            kw["groups"] = v
        else:
            kw[axis] = v
            kw.setdefault("groups", groups)
        out.append(HetModelParams(**kw))
    return tuple(out)


def _diversity_groups(theta_bar: float, delta: float) -> GroupSpec:
    if delta == 0:
        return GroupSpec((theta_bar,), (1.0,))
    return GroupSpec((theta_bar * (1 - delta), theta_bar * (1 + delta)), (0.5, 0.5))


def regimes() -> dict[str, Regime]:
    three = ("below", "at", "above")
    lmh = ("low", "mid", "high")
    sig_c = math.sqrt(20.0 / 3.0)
    het_sc = critical_sigma_div(HET_GROUPS)
    deltas = (0.0, 0.4, 0.8)
    base = dict(n_agents=100, horizon=100.0, dt=0.02)
    small = dict(n_agents=20, horizon=100.0, dt=0.02)
    # group thetas reach 19, so the heterogeneous runs use a finer step
    het_base = dict(base, dt=0.01)
    het_small = dict(small, dt=0.01)
    regs = [
        Regime(
            "sigma-sweep", "sigma", three,
            _homog("sigma", (2.0, sig_c, 3.2), h=0.1, theta=10.0, **base),
            "sigma_c = sqrt(2 theta / 3) at theta = 10", (2.0, sig_c, 3.2),
        ),
        Regime(
            "theta-sweep", "theta", ("above", "at", "below"),
            _homog("theta", (1.0, 1.5, 3.0), h=0.1, sigma=1.0, **base),
            "criterion met at theta = 1.5 for sigma = 1; larger theta is bistable",
            (1.0, 1.5, 3.0),
        ),
        Regime(
            "h-sweep", "h", lmh, _homog("h", (0.02, 0.1, 0.3), theta=10.0, sigma=1.0, **small),
            "transition counts should fall as h grows", (0.02, 0.1, 0.3),
        ),
        Regime(
            "N-sweep", "n_agents", lmh,
            _homog("n_agents", (10, 20, 40), h=0.1, theta=10.0, sigma=1.0, horizon=100.0, dt=0.02),
            "", (10, 20, 40),
        ),
        Regime(
            "het-sigma", "sigma", three,
            _het("sigma", (0.8 * het_sc, het_sc, 1.2 * het_sc), h=0.1, **het_base),
            f"groups theta=(5,15), rho=(0.5,0.5); sigma_c^div = {het_sc:.6g}",
            (0.8 * het_sc, het_sc, 1.2 * het_sc),
        ),
        Regime(
            "het-h", "h", lmh, _het("h", (0.05, 0.1, 0.2), sigma=1.0, **het_small),
            "groups theta=(5,15), rho=(0.5,0.5)", (0.05, 0.1, 0.2),
        ),
        Regime(
            "het-N", "n_agents", lmh,
            _het("n_agents", (10, 20, 40), sigma=1.0, h=0.1, horizon=100.0, dt=0.01),
            "groups theta=(5,15), rho=(0.5,0.5)", (10, 20, 40),
        ),
        Regime(
            "het-diversity", "groups", lmh,
            _het(
                "groups", tuple(_diversity_groups(10.0, d) for d in deltas),
                sigma=1.0, h=0.1, n_agents=40, horizon=100.0, dt=0.01,
            ),
            "theta = 10 (1 -/+ delta), rho=(0.5,0.5), mean theta fixed at 10", deltas,
        ),
    ]
    return {r.name: r for r in regs}


REGIME_NAMES = tuple(regimes())


def run_regime(
    regime: Regime, seed: int, replicas: int = 64, threads: int = 1
) -> tuple[list[tuple[str, object]], dict]:
    """Trajectories plus ensemble transition counts for each point of a regime.

    Returns ``([(label, Trajectory), ...], manifest_entry)``.  Counts are
    omitted (null) at points without a bistable equilibrium.
    """
    trajs = []
    entry = {"axis": regime.axis, "note": regime.note, "points": []}
    for label, value, p in zip(regime.labels, regime.values, regime.points):
        traj = simulate_replica(p, seed, initial="minus-one")
        trajs.append((label, traj))
        counts: Optional[dict] = None
        try:
            ens = run_ensemble(p, replicas, seed, initial="minus-xib", threads=threads)
            counts = {
                "replicas": replicas,
                "transitions": ens.transitions_by_T,
                "p_hat": ens.p_hat,
                "mean_crossings": float(ens.n_transitions.mean()),
                "xi_b": ens.xi_b,
            }
        except (EquilibriumError, SimulationError, ValueError):
            pass
        entry["points"].append(
            {"label": label, "value": value, "params": p.to_dict(), "ensemble": counts}
        )
    entry["rng"] = rng_metadata(seed)
    return trajs, entry
