"""Command-line front end (``mfrisk`` / ``python3 -m mfrisk``).

Exit codes: 0 success, 1 unexpected internal error, 2 usage, 3 invalid
configuration, 4 I/O failure, 5 numerical failure.  Errors are reported as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import diversity, equilibrium, figures, fluctuation, fokker_planck, largedev, simulate
from .model import GroupSpec, HetModelParams, InvalidParams, ModelParams, check, params_from_json

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print and exit(2) itself
        raise UsageError(message)


# --- output helpers ----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def atomic_write(path: Path, text: str) -> None:
    """Write via a temp file in the target directory and rename into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Output:
    """Collects artifacts and commits them only once the command succeeded."""

    def __init__(self, out_dir: str, fmt: str):
        self.out_dir = Path(out_dir)
        self.fmt = fmt
        self.pending: list[tuple[Path, str]] = []

    def file(self, name: Optional[str], text: str) -> None:
        if name:
            p = Path(name)
            self.pending.append((p if p.is_absolute() else self.out_dir / p, text))

    def commit(self) -> list[str]:
        for path, text in self.pending:
            atomic_write(path, text)
        return [str(p) for p, _ in self.pending]

    def summary(self, record: dict) -> str:
        if self.fmt == "csv":
            flat = {k: v for k, v in record.items() if not isinstance(v, (dict, list))}
            return csv_text(list(flat), [list(flat.values())])
        return json_text(record)


# --- configuration ------------------------------------------------------------


def _load_json(spec: str):
    """Inline JSON, or a path to a JSON file."""
    s = spec.strip()
    if s.startswith(("{", "[")):
        try:
            return json.loads(s)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc}") from exc
    with open(spec, "r") as fh:  # OSError propagates as an I/O failure
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {spec}: {exc}") from exc


_INLINE = {"h": "h", "theta": "theta", "sigma": "sigma", "N": "n_agents", "T": "horizon", "dt": "dt"}


def _add_param_flags(p: argparse.ArgumentParser, with_T: bool = True) -> None:
    p.add_argument("--config", help="JSON parameter file (or inline JSON object)")
    p.add_argument("--h", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--N", type=int)
    if with_T:
        p.add_argument("--T", type=float)
    p.add_argument("--dt", type=float)


def _raw_params(args) -> dict:
    d = dict(_load_json(args.config)) if args.config else {}
    for flag, key in _INLINE.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    return d


def _model_params(args, allow_groups: bool = False):
    d = _raw_params(args)
    groups = getattr(args, "groups", None)
    if groups:
        d["groups"] = _load_json(groups)
    if "groups" in d and not allow_groups:
        raise ConfigError("this subcommand takes homogeneous parameters (no 'groups')")
    try:
        p = params_from_json(d)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidParams):
            raise
        raise ConfigError(f"incomplete or malformed parameters: {exc}") from exc
    check(p)
    return p


def _float_list(text: str) -> list[float]:
    """'a,b,c' or 'start:stop:num' (inclusive linspace)."""
    try:
        if ":" in text:
            a, b, n = text.split(":")
            return [float(v) for v in np.linspace(float(a), float(b), int(n))]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse number list {text!r}") from exc


# --- subcommands --------------------------------------------------------------


def _cmd_simulate(args, out: Output, kind: str) -> dict:
    if kind == "het":
        p = _model_params(args, allow_groups=True)
        if not isinstance(p, HetModelParams):
            raise ConfigError("simulate-het needs a 'groups' list")
    else:
        p = _model_params(args)
    meta = {"seed": args.seed, "params": p.to_dict(), "rng": simulate.rng_metadata(args.seed)}
    if kind == "reduced":
        init = None if args.initial == "minus-xib" else -1.0
        traj = simulate.simulate_reduced(p, args.seed, initial=init)
    elif args.replicas is not None:
        ens = simulate.run_ensemble(
            p, args.replicas, args.seed, initial=args.initial, threads=args.threads
        )
        rec = ens.to_dict(p)
        out.file(args.out, json_text(rec))
        return rec
    else:
        traj = simulate.simulate_replica(p, args.seed, initial=args.initial)
    text = csv_text(traj.header(), traj.rows())
    name = args.out or f"{'simulate-' + kind if kind != 'homog' else 'simulate'}.csv"
    out.file(name, text)
    out.file(name + ".meta.json", json_text(meta))
    return {"trajectory": name, "n_rows": len(traj.times), **meta}


def _cmd_equilibrium(args, out: Output) -> dict:
    p = _model_params(args, allow_groups=True)
    if isinstance(p, HetModelParams):
        if p.h == 0:
            xi = equilibrium.small_h_equilibrium_div(p.groups, p.sigma)
            sol = equilibrium.EquilibriumSolution(
                xi, None, equilibrium.critical_sigma_div(p.groups), True, "small-h-expansion"
            )
        else:
            sol = equilibrium.solve_bistable_div(p)
    elif p.h == 0:
        sol = equilibrium.expansion_solution(p)
    else:
        sol = equilibrium.solve_bistable(p)
    rec = sol.to_dict()
    out.file(args.out, json_text(rec))
    return rec


def _cmd_rate(args, out: Output) -> dict:
    n_agents = args.N if args.N is not None else 100
    path = None
    if args.method is None:
        args.method = "h0" if args.xi0 is not None else "small-h"
    if args.method == "h0" and args.xi0 is not None:
        if args.sigma is None or args.T is None:
            raise UsageError("--xi0 needs --sigma and --T")
        value = largedev.rate_h0(args.xi0, args.sigma, args.T)
    else:
        p = _model_params(args)
        n_agents = p.n_agents
        est = largedev.estimate_rate(p, args.method, args.T, args.grid)
        value, path = est.value, est.path
    tp = largedev.transition_probability_ld(value, n_agents)
    rec = {"rate": value, "method": args.method, "N": n_agents, "log_p": tp.log_p, "p": tp.p}
    out.file(args.out, json_text(rec))
    if args.path_out and path is not None:
        out.file(args.path_out, csv_text(["t", "a"], zip(path.times, path.values)))
    return rec


def _cmd_diversity(args, out: Output) -> dict:
    groups = GroupSpec.from_list(_load_json(args.groups))
    check(groups)
    exact = diversity.transition_probability_diverse(groups, args.sigma, args.N, args.T)
    rec = {
        "groups": groups.to_list(),
        "sigma": args.sigma,
        "N": args.N,
        "T": args.T,
        "sigma_c_div": equilibrium.critical_sigma_div(groups),
        "exact": {"xi_b": exact.xi_b, "sigma_T2": exact.sigma_T2, "log_p": exact.log_p, "p": exact.p},
    }
    if args.delta_scan:
        # alpha_k = theta_k / theta_bar - 1, so delta = 1 reproduces the given groups
        tb = groups.mean_theta()
        alphas = [t / tb - 1.0 for t in groups.thetas]
        rows = diversity.diversity_scan(
            tb, alphas, groups.fractions, args.sigma, args.N, args.T, _float_list(args.delta_scan)
        )
        rec["theta_bar"], rec["alphas"], rec["scan"] = tb, alphas, rows
        cols = ["delta", "xi_b2_exact", "xi_b2_exp", "sigmaT2_exact", "sigmaT2_exp", "log_pT_exp"]
        out.file(args.csv_out, csv_text(cols, ([r[c] for c in cols] for r in rows)))
    out.file(args.out, json_text(rec))
    return rec


def _cmd_fluctuation(args, out: Output) -> dict:
    p = _model_params(args)
    times = _float_list(args.t_grid) if args.t_grid else [p.horizon]
    rows = []
    if args.validate:
        for t in times:
            rows.append(fluctuation.validate_fluctuations(p, args.replicas, args.seed, t).as_row())
        cols = ["t", "var_mean_cf", "var_agent_cf", "var_mean_mc", "var_agent_mc", "se_mean", "se_agent"]
    else:
        rows = [fluctuation.linearized_variances(p, t).as_row() for t in times]
        cols = ["t", "var_mean_cf", "var_agent_cf"]
    out.file(args.out, csv_text(cols, ([r[c] for c in cols] for r in rows)))
    exact = [fluctuation.linearized_variances(p, t).as_row(exact=True) for t in times]
    return {"params": p.to_dict(), "seed": args.seed, "rows": rows, "exact_linear": exact}


def _cmd_fokker_planck(args, out: Output) -> dict:
    p = _model_params(args, allow_groups=True)
    dom = tuple(_float_list(args.domain))
    if len(dom) != 2:
        raise UsageError("--domain needs two numbers")
    times = sorted(_float_list(args.times)) if args.times else [args.t_end]
    if times[-1] > args.t_end + 1e-12:
        raise UsageError("--times must not exceed --t-end")
    het = isinstance(p, HetModelParams)
    thetas = p.groups.thetas if het else (p.theta,)

    def one(theta):
        if args.initial == "gaussian":
            return fokker_planck.gaussian_grid(args.mean, args.var, dom, args.cells)
        xi = -equilibrium.small_h_equilibrium_div(p.groups, p.sigma) if het else -equilibrium.equilibrium_xi_b(p)
        base = p if not het else ModelParams(h=p.h, theta=theta, sigma=p.sigma)
        return fokker_planck.equilibrium_grid(xi, base, dom, args.cells, theta=theta)

    if het:
        init = fokker_planck.stack_grids([one(t) for t in thetas])
        final, snaps = fokker_planck.evolve_fp_system(init, p.groups, p.sigma, p.h, args.t_end, times)
    else:
        final, snaps = fokker_planck.evolve_fp(one(p.theta), p, args.t_end, times)
    if not snaps or abs(snaps[-1].time - args.t_end) > 1e-9:
        snaps.append(final)
    ucols = [f"u_{k + 1}" for k in range(len(thetas))] if het else ["u"]
    rows = []
    for g in snaps:
        vals = np.atleast_2d(g.values)
        for i, y in enumerate(g.centers):
            rows.append([g.time, y, *vals[:, i]])
    name = args.out or "fokker-planck.csv"
    out.file(name, csv_text(["time", "y", *ucols], rows))
    m1, m2 = final.moments()
    return {"output": name, "t_end": args.t_end, "mean": m1, "second_moment": m2, "params": p.to_dict()}


def _cmd_figures(args, out: Output) -> dict:
    regs = figures.regimes()
    names = figures.REGIME_NAMES if args.regime == "all" else [args.regime]
    manifest = {"seed": args.seed, "replicas": args.replicas, "regimes": {}}
    for name in names:
        trajs, entry = figures.run_regime(regs[name], args.seed, args.replicas, args.threads)
        files = []
        for label, traj in trajs:
            fname = f"figures/{name}/{label}.csv"
            out.file(fname, csv_text(traj.header(), traj.rows()))
            files.append(fname)
        entry["files"] = files
        manifest["regimes"][name] = entry
    out.file("figures/manifest.json", json_text(manifest))
    return manifest


# --- parser and dispatch --------------------------------------------------------


def _add_global_flags(p: argparse.ArgumentParser, default) -> None:
    def d(v):
        return v if default is None else default

    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--out-dir", default=d("."))
    p.add_argument("--threads", type=int, default=d(None), help="worker processes (env MFRISK_THREADS)")
    p.add_argument("--format", choices=("json", "csv"), default=d("json"), help="stdout summary format")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mfrisk", description=__doc__.splitlines()[0])
    _add_global_flags(ap, None)
    # the same flags after the subcommand; SUPPRESS keeps them from clobbering earlier values
    common = _Parser(add_help=False)
    _add_global_flags(common, argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common])

    for name in ("simulate", "simulate-het", "simulate-reduced"):
        s = command(name)
        _add_param_flags(s)
        s.add_argument("--replicas", type=int, help="run an ensemble and emit JSON")
        s.add_argument("--initial", choices=("minus-one", "minus-xib"), default="minus-one")
        s.add_argument("--out")
        if name == "simulate-het":
            s.add_argument("--groups", help="JSON list of {theta, fraction}")

    s = command("equilibrium")
    _add_param_flags(s)
    s.add_argument("--groups")
    s.add_argument("--out")

    s = command("rate")
    _add_param_flags(s)
    s.add_argument("--xi0", type=float, help="h = 0 shortcut: rate from xi0, sigma, T")
    s.add_argument("--method", choices=("h0", "small-h", "minimize", "gaussian-path", "bvp"), default=None,
                   help="default small-h, or h0 when --xi0 is given")
    s.add_argument("--grid", type=int, default=largedev.DEFAULT_GRID)
    s.add_argument("--out")
    s.add_argument("--path-out", help="CSV t,a of the optimal mean path")

    s = command("diversity")
    s.add_argument("--groups", required=True)
    s.add_argument("--sigma", type=float, required=True)
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--delta-scan", help="comma list or start:stop:num")
    s.add_argument("--out")
    s.add_argument("--csv-out", default="diversity_scan.csv")

    s = command("fluctuation")
    _add_param_flags(s)
    s.add_argument("--t-grid")
    s.add_argument("--validate", action="store_true")
    s.add_argument("--replicas", type=int, default=10_000)
    s.add_argument("--out", default="fluctuation.csv")

    s = command("fokker-planck")
    _add_param_flags(s)
    s.add_argument("--groups")
    s.add_argument("--t-end", type=float, required=True)
    s.add_argument("--times", help="output times (comma list or start:stop:num)")
    s.add_argument("--initial", choices=("equilibrium", "gaussian"), default="equilibrium")
    s.add_argument("--mean", type=float, default=-1.0)
    s.add_argument("--var", type=float, default=0.05)
    s.add_argument("--domain", default="-4,4")
    s.add_argument("--cells", type=int, default=fokker_planck.DEFAULT_CELLS)
    s.add_argument("--out")

    s = command("figures")
    s.add_argument("--regime", choices=("all", *figures.REGIME_NAMES), default="all")
    s.add_argument("--replicas", type=int, default=64)
    return ap


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("MFRISK_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"MFRISK_THREADS must be an integer (got {env!r})") from exc
    return 1


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}) + "\n")
    return code


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.threads = _threads(args)
        out = Output(args.out_dir, args.format)
        cmd = args.command
        if cmd.startswith("simulate"):
            rec = _cmd_simulate(args, out, {"simulate": "homog", "simulate-het": "het"}.get(cmd, "reduced"))
        else:
            rec = {
                "equilibrium": _cmd_equilibrium,
                "rate": _cmd_rate,
                "diversity": _cmd_diversity,
                "fluctuation": _cmd_fluctuation,
                "fokker-planck": _cmd_fokker_planck,
                "figures": _cmd_figures,
            }[cmd](args, out)
        out.commit()
        sys.stdout.write(out.summary(rec))
        return EXIT_OK
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except InvalidParams as exc:
        return _fail(EXIT_CONFIG, "invalid-config", str(exc), errors=exc.errors)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "invalid-config", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except (
        equilibrium.EquilibriumError,
        equilibrium.QuadratureError,
        largedev.ConvergenceError,
        fokker_planck.FokkerPlanckError,
        simulate.SimulationError,
        ArithmeticError,
        ValueError,
    ) as exc:
        return _fail(EXIT_NUMERIC, "numerical", str(exc))
    except Exception as exc:  # keep the stderr contract even for bugs
        return _fail(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")


def main() -> None:
    sys.exit(run())
