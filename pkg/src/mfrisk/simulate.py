"""Euler-Maruyama simulation of the particle systems and transition counting.

Random numbers: every replica owns a ``numpy.random.Generator`` over the
counter-based Philox4x32-10 bit generator, keyed by
``SeedSequence(seed, spawn_key=(replica,))``.  Within a replica the stream is
consumed step-major: step n draws its N agent normals (agent order) before
step n+1.  Draws are made in blocks of whole steps, which yields the same
sequence as drawing step by step, so batching and worker count never change
results.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import binomtest

from .model import (
    GroupSpec,
    HetModelParams,
    ModelParams,
    SystemState,
    check,
    force_U,
)

RNG_ALGORITHM = "numpy.random.Philox (Philox4x32-10)"
RNG_LAYOUT = (
    "Generator(Philox(SeedSequence(seed, spawn_key=(replica,)))); "
    "per step one block of N standard normals in agent order"
)
DEFAULT_BAND = 0.5
_STEP_BLOCK = 250
_BATCH = 256

Initial = Union[str, np.ndarray, Sequence[float], float]
AnyParams = Union[ModelParams, HetModelParams]


class SimulationError(RuntimeError):
    def __init__(self, message: str, replica: Optional[int] = None, step: Optional[int] = None):
        self.replica = replica
        self.step = step
        super().__init__(message)


def replica_generator(seed: int, replica: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica),))
    return np.random.Generator(np.random.Philox(ss))


def rng_metadata(seed: int) -> dict:
    return {"algorithm": RNG_ALGORITHM, "layout": RNG_LAYOUT, "seed": int(seed)}


# --- single steps -----------------------------------------------------------


def _euler(x, xbar, h, theta, sigma, dt, g):
    # term order is part of the reproducibility contract
    return x - h * force_U(x) * dt + sigma * math.sqrt(dt) * g + theta * (xbar - x) * dt


def step_homogeneous(state: SystemState, params: ModelParams, gaussians) -> SystemState:
    """One Euler step of the homogeneous system, interaction uses the pre-step mean."""
    x = np.asarray(state.positions, dtype=float)
    g = np.asarray(gaussians, dtype=float)
    if g.shape != x.shape:
        raise ValueError(f"need {x.shape[0]} gaussians, got {g.shape}")
    xbar = x.mean()
    new = _euler(x, xbar, params.h, params.theta, params.sigma, params.dt, g)
    return SystemState(new, state.time + params.dt)


def assign_groups(groups: GroupSpec, n_agents: int) -> np.ndarray:
    """Group index of each agent by largest-remainder apportionment in group order."""
    fr = np.asarray(groups.fractions, dtype=float)
    quota = fr * n_agents
    counts = np.floor(quota).astype(int)
    remainder = n_agents - counts.sum()
    # stable sort keeps group order among equal remainders
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:remainder]] += 1
    if np.any(counts == 0):
        raise ValueError(
            f"fractions {list(groups.fractions)} unrealizable with N={n_agents}: "
            f"group sizes {counts.tolist()}"
        )
    return np.repeat(np.arange(groups.k), counts)


def agent_thetas(params: HetModelParams) -> np.ndarray:
    idx = assign_groups(params.groups, params.n_agents)
    return np.asarray(params.groups.thetas)[idx]


def step_heterogeneous(
    state: SystemState, params: HetModelParams, gaussians, thetas: Optional[np.ndarray] = None
) -> SystemState:
    x = np.asarray(state.positions, dtype=float)
    g = np.asarray(gaussians, dtype=float)
    if g.shape != x.shape:
        raise ValueError(f"need {x.shape[0]} gaussians, got {g.shape}")
    if thetas is None:
        thetas = np.asarray(params.groups.thetas)[assign_groups(params.groups, x.shape[0])]
    xbar = x.mean()
    new = _euler(x, xbar, params.h, thetas, params.sigma, params.dt, g)
    return SystemState(new, state.time + params.dt)


# --- trajectories and transitions ------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    means: np.ndarray
    group_means: Optional[np.ndarray] = None  # shape (n_times, K)

    def header(self) -> list[str]:
        cols = ["t", "xbar"]
        if self.group_means is not None:
            cols += [f"xbar_g{k + 1}" for k in range(self.group_means.shape[1])]
        return cols

    def rows(self):
        for i in range(len(self.times)):
            row = [self.times[i], self.means[i]]
            if self.group_means is not None:
                row.extend(self.group_means[i])
            yield row


@dataclass(frozen=True)
class TransitionEvent:
    start_index: int
    end_index: int
    direction: int  # +1 for -xi_b -> +xi_b, -1 for the reverse


def _resolve(x: float, lo: float, hi: float, current: int) -> int:
    if x < lo:
        return -1
    if x > hi:
        return 1
    return current


def detect_transitions(traj, xi_b: float, band: float = DEFAULT_BAND) -> list[TransitionEvent]:
    """Hysteresis detector on the empirical mean.

    The system sits at "-" while xbar < -band*xi_b and at "+" while
    xbar > band*xi_b; in between it keeps its last resolved side.  Each change
    of resolved side is one event, from the last index on the old side to the
    first index on the new one.
    """
    if xi_b <= 0:
        raise ValueError("xi_b must be positive")
    if not 0 < band < 1:
        raise ValueError("band must lie in (0, 1)")
    means = traj.means if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    lo, hi = -band * xi_b, band * xi_b
    state, last_in = 0, -1
    events = []
    for i, x in enumerate(means):
        new = _resolve(x, lo, hi, state)
        if state != 0 and new != state:
            events.append(TransitionEvent(last_in, i, new))
        state = new
        if state != 0 and _resolve(x, lo, hi, 0) == state:
            last_in = i
    return events


# --- ensemble engine --------------------------------------------------------


def _initial_vector(params: AnyParams, initial: Initial) -> np.ndarray:
    n = params.n_agents
    if isinstance(initial, str):
        if initial == "minus-one":
            return np.full(n, -1.0)
        if initial == "minus-xib":
            return np.full(n, -_xi_b_for(params))
        raise ValueError(f"unknown initial condition {initial!r}")
    x0 = np.asarray(initial, dtype=float)
    if x0.ndim == 0:
        return np.full(n, float(x0))
    if x0.shape != (n,):
        raise ValueError(f"initial vector must have length {n}")
    return x0.copy()


def _xi_b_for(params: AnyParams) -> float:
    from . import equilibrium as eq

    if isinstance(params, HetModelParams):
        if params.h == 0:
            return eq.small_h_equilibrium_div(params.groups, params.sigma)
        sol = eq.solve_bistable_div(params)
    else:
        if params.h == 0:
            return eq.small_h_equilibrium(params)[0]
        sol = eq.solve_bistable(params)
    if not sol.bistable:
        raise ValueError("initial 'minus-xib' needs a bistable parameter set")
    return sol.xi_b


def _theta_field(params: AnyParams):
    if isinstance(params, HetModelParams):
        return agent_thetas(params)
    return params.theta


def _integrate(x0, params: AnyParams, theta, rngs, observer, first_replica=0, noise_sign=1.0):
    """Advance a (B, N) batch for params.n_steps steps, calling observer(n, x, xbar)."""
    x = np.array(x0, dtype=float)
    h, sigma, dt = params.h, params.sigma, params.dt
    n_steps = params.n_steps
    n_agents = x.shape[-1]
    xbar = x.mean(axis=-1)
    observer(0, x, xbar)
    done = 0
    while done < n_steps:
        c = min(_STEP_BLOCK, n_steps - done)
        noise = np.stack([r.standard_normal((c, n_agents)) for r in rngs], axis=1)
        if noise_sign != 1.0:
            noise = noise_sign * noise
        for k in range(c):
            x = _euler(x, xbar[:, None], h, theta, sigma, dt, noise[k])
            xbar = x.mean(axis=-1)
            if not np.all(np.isfinite(xbar)):
                bad = int(np.flatnonzero(~np.isfinite(xbar))[0])
                step = done + k + 1
                raise SimulationError(
                    f"non-finite state at step {step} (t={step * dt:.6g}) in replica "
                    f"{first_replica + bad}; the explicit scheme is unstable here",
                    replica=first_replica + bad,
                    step=step,
                )
            observer(done + k + 1, x, xbar)
        done += c
    return x


def simulate_replica(
    params: AnyParams,
    seed: int,
    initial: Initial = "minus-one",
    replica: int = 0,
    noise_sign: float = 1.0,
) -> Trajectory:
    """Full trajectory of the empirical mean (and group means when heterogeneous).

    ``noise_sign`` multiplies every Gaussian draw: -1 gives the mirrored
    stream, 0 a noise-free run with the same step sequence.
    """
    check(params)
    x0 = _initial_vector(params, initial)[None, :]
    theta = _theta_field(params)
    n = params.n_steps
    means = np.empty(n + 1)
    het = isinstance(params, HetModelParams)
    if het:
        idx = assign_groups(params.groups, params.n_agents)
        counts = np.bincount(idx, minlength=params.groups.k)
        gm = np.empty((n + 1, params.groups.k))

    def observe(i, x, xbar):
        means[i] = xbar[0]
        if het:
            gm[i] = np.bincount(idx, weights=x[0], minlength=params.groups.k) / counts

    _integrate(x0, params, theta, [replica_generator(seed, replica)], observe, replica, noise_sign)
    times = np.arange(n + 1) * params.dt
    return Trajectory(times, means, gm if het else None)


def simulate_population(
    params: AnyParams, seed: int, replicas: int, initial: Initial = "minus-one", first_replica: int = 0
) -> np.ndarray:
    """Agent positions at the horizon, shape (replicas, N).

    ``initial`` may also be a (replicas, N) array of per-replica starts.
    Replica r uses the same stream as ``simulate_replica(..., replica=r)``.
    """
    check(params)
    x0 = np.asarray(initial, dtype=float) if not isinstance(initial, str) else None
    if x0 is not None and x0.ndim == 2:
        if x0.shape != (replicas, params.n_agents):
            raise ValueError(f"initial array must have shape ({replicas}, {params.n_agents})")
        start = x0
    else:
        start = np.broadcast_to(_initial_vector(params, initial), (replicas, params.n_agents))
    theta = _theta_field(params)
    out = np.empty((replicas, params.n_agents))
    for s in range(0, replicas, _BATCH):
        e = min(s + _BATCH, replicas)
        rngs = [replica_generator(seed, first_replica + r) for r in range(s, e)]
        out[s:e] = _integrate(start[s:e], params, theta, rngs, lambda *a: None, first_replica + s)
    return out


@dataclass
class EnsembleResult:
    n_replicas: int
    transitions_by_T: int
    p_hat: float
    ci_low: float
    ci_high: float
    seed: int
    first_passage: np.ndarray = field(repr=False)  # time of first -/+ transition, nan if none
    n_transitions: np.ndarray = field(repr=False)  # resolved-side changes per replica
    mean_xbar: np.ndarray = field(repr=False)  # time average of xbar per replica
    xi_b: float = float("nan")

    def to_dict(self, params: Optional[AnyParams] = None) -> dict:
        d = {
            "replicas": self.n_replicas,
            "transitions": self.transitions_by_T,
            "p_hat": self.p_hat,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "seed": self.seed,
            "xi_b": self.xi_b,
            "rng": rng_metadata(self.seed),
        }
        if params is not None:
            d["params"] = params.to_dict()
        return d


def _ensemble_batch(args):
    params, x0, seed, start, stop, xi_b, band = args
    theta = _theta_field(params)
    b = stop - start
    rngs = [replica_generator(seed, r) for r in range(start, stop)]
    lo, hi = -band * xi_b, band * xi_b
    state = np.where(x0.mean() < lo, -1, np.where(x0.mean() > hi, 1, 0)) * np.ones(b, dtype=int)
    first = np.full(b, np.nan)
    n_tr = np.zeros(b, dtype=int)
    total = np.zeros(b)
    dt = params.dt

    def observe(i, x, xbar):
        nonlocal state
        new = np.where(xbar < lo, -1, np.where(xbar > hi, 1, state))
        changed = (state != 0) & (new != state)
        n_tr[changed] += 1
        up = changed & (new == 1) & np.isnan(first)
        first[up] = i * dt
        state = new
        w = 0.5 if i in (0, params.n_steps) else 1.0
        total[:] += w * xbar

    _integrate(np.broadcast_to(x0, (b, x0.shape[0])), params, theta, rngs, observe, start)
    return first, n_tr, total * dt / params.horizon


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(k, n).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def run_ensemble(
    params: AnyParams,
    replicas: int,
    master_seed: int,
    initial: Initial = "minus-xib",
    threads: int = 1,
    band: float = DEFAULT_BAND,
    xi_b: Optional[float] = None,
) -> EnsembleResult:
    """Independent replicas; p_hat counts replicas with at least one -xi_b -> +xi_b transition."""
    check(params)
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if xi_b is None:
        xi_b = _xi_b_for(params)
    x0 = _initial_vector(params, initial)
    batches = [
        (params, x0, master_seed, s, min(s + _BATCH, replicas), xi_b, band)
        for s in range(0, replicas, _BATCH)
    ]
    if threads > 1 and len(batches) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_ensemble_batch, batches))
    else:
        parts = [_ensemble_batch(b) for b in batches]
    first = np.concatenate([p[0] for p in parts])
    n_tr = np.concatenate([p[1] for p in parts])
    avg = np.concatenate([p[2] for p in parts])
    k = int(np.sum(~np.isnan(first)))
    lo, hi = wilson_interval(k, replicas)
    return EnsembleResult(
        n_replicas=replicas,
        transitions_by_T=k,
        p_hat=k / replicas,
        ci_low=lo,
        ci_high=hi,
        seed=int(master_seed),
        first_passage=first,
        n_transitions=n_tr,
        mean_xbar=avg,
        xi_b=float(xi_b),
    )


# --- reduced and partial-average systems -----------------------------------


def simulate_reduced(
    params: ModelParams,
    seed: int,
    initial: Optional[float] = None,
    noise: bool = True,
    replica: int = 0,
) -> Trajectory:
    """Euler scheme for dxbar = -h[xbar^3 - (1 - 3 sigma^2/2theta) xbar] dt + sigma/sqrt(N) dw."""
    check(params)
    c = 1.0 - 3.0 * params.noise_to_reversion
    if c <= 0:
        raise ValueError("reduced dynamics need 3 sigma^2 / (2 theta) < 1")
    x = -math.sqrt(c) if initial is None else float(initial)
    n, dt, h = params.n_steps, params.dt, params.h
    amp = params.sigma / math.sqrt(params.n_agents) * math.sqrt(dt)
    rng = replica_generator(seed, replica)
    out = np.empty(n + 1)
    out[0] = x
    done = 0
    while done < n:
        blk = min(100_000, n - done)
        g = rng.standard_normal(blk).tolist() if noise else [0.0] * blk
        for k in range(blk):
            x = x - h * (x * x * x - c * x) * dt + amp * g[k]
            out[done + k + 1] = x
        if not math.isfinite(x):
            bad = int(np.flatnonzero(~np.isfinite(out[: done + blk + 1]))[0])
            raise SimulationError(f"non-finite state at step {bad}", replica=replica, step=bad)
        done += blk
    return Trajectory(np.arange(n + 1) * dt, out)


def _partial_average_setup(groups: GroupSpec, sigma: float, n_agents: int):
    from .diversity import build_matrices

    mats = build_matrices(groups)
    amp = sigma / math.sqrt(n_agents) / np.sqrt(mats.rho)
    return mats, amp


def simulate_partial_averages(
    groups: GroupSpec,
    sigma: float,
    n_agents: int,
    seed: int,
    initial: Initial = -1.0,
    horizon: float = 10.0,
    dt: float = 0.01,
    noise: bool = True,
    replica: int = 0,
) -> Trajectory:
    """Euler scheme for the h = 0 partial averages dX = M X dt + sigma/sqrt(N) R^{-1/2} dW."""
    check(groups)
    mats, amp = _partial_average_setup(groups, sigma, n_agents)
    k = groups.k
    x = np.broadcast_to(np.asarray(initial, dtype=float), (k,)).astype(float)
    n = int(round(horizon / dt))
    rng = replica_generator(seed, replica)
    g = rng.standard_normal((n, k)) if noise else np.zeros((n, k))
    xs = np.empty((n + 1, k))
    xs[0] = x
    sq = math.sqrt(dt)
    for i in range(n):
        x = x + (mats.M @ x) * dt + amp * sq * g[i]
        xs[i + 1] = x
    return Trajectory(np.arange(n + 1) * dt, xs @ mats.rho, xs)


def partial_average_terminal(
    groups: GroupSpec,
    sigma: float,
    n_agents: int,
    horizon: float,
    replicas: int,
    master_seed: int,
    dt: float = 0.01,
    initial: Initial = 0.0,
) -> np.ndarray:
    """xbar(T) over independent replicas of the partial-average system.

    Replica r uses the same noise stream as ``simulate_partial_averages(..., replica=r)``.
    """
    check(groups)
    mats, amp = _partial_average_setup(groups, sigma, n_agents)
    k = groups.k
    n = int(round(horizon / dt))
    out = np.empty(replicas)
    sq = math.sqrt(dt)
    for start in range(0, replicas, 1024):
        stop = min(start + 1024, replicas)
        g = np.stack(
            [replica_generator(master_seed, r).standard_normal((n, k)) for r in range(start, stop)],
            axis=1,
        )
        x = np.tile(np.broadcast_to(np.asarray(initial, dtype=float), (k,)), (stop - start, 1))
        for i in range(n):
            x = x + (x @ mats.M.T) * dt + amp * sq * g[i]
        out[start:stop] = x @ mats.rho
    return out
