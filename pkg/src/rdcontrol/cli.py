"""``rdcontrol run <config>`` and ``rdcontrol validate <config>``.

The config is an INI file.  Every experiment writes ``trajectory.csv``,
``diagnostics.csv`` and ``summary`` into ``[experiment] output``.
"""
from __future__ import annotations

import argparse
import configparser
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import carleman, hum, structure
from .control import (FixedPointConfig, FixedPointError, InadmissibleError, StaircaseConfig,
                      StaircaseError, global_control, local_control)
from .grid import Domain1D
from .simulate import CouplingField, TimeGrid, Trajectory, simulate_nonlinear

KINDS = ("simulate", "invariants", "kalman", "weights", "control-linear", "control-local",
         "control-global", "observability")
FMT = "%.17g"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"[{key}] {message}")
        self.key = key


# ---------------------------------------------------------------------------
# config

class _Reader:
    def __init__(self, cp: configparser.ConfigParser):
        self.cp = cp

    def raw(self, sec, key, default=None):
        if self.cp.has_option(sec, key):
            return self.cp.get(sec, key).strip()
        if default is None:
            raise ConfigError(f"{sec}.{key}", "missing")
        return default

    def _conv(self, sec, key, default, fn, what):
        v = self.raw(sec, key, default)
        if not isinstance(v, str):
            return v
        try:
            return fn(v)
        except ValueError:
            raise ConfigError(f"{sec}.{key}", f"expected {what}, got {v!r}") from None

    def float(self, sec, key, default=None):
        return self._conv(sec, key, default, float, "a number")

    def int(self, sec, key, default=None):
        return self._conv(sec, key, default, int, "an integer")

    def opt_float(self, sec, key):
        v = self.raw(sec, key, "")
        if v in ("", "auto", "none"):
            return None
        return self._conv(sec, key, None, float, "a number or 'auto'")

    def vec(self, sec, key, size, default=None):
        v = self.raw(sec, key, default)
        if not isinstance(v, str):
            return np.asarray(v, float)
        try:
            out = np.array([float(s) for s in v.replace(",", " ").split()])
        except ValueError:
            raise ConfigError(f"{sec}.{key}", f"expected {size} numbers, got {v!r}") from None
        if out.size != size:
            raise ConfigError(f"{sec}.{key}", f"expected {size} numbers, got {out.size}")
        return out

    def bool(self, sec, key, default):
        v = self.raw(sec, key, "yes" if default else "no").lower()
        if v in ("1", "yes", "true", "on"):
            return True
        if v in ("0", "no", "false", "off"):
            return False
        raise ConfigError(f"{sec}.{key}", f"expected yes/no, got {v!r}")


@dataclass
class ExperimentConfig:
    kind: str
    output: Path
    seed: int
    dom: Domain1D
    tg: TimeGrid
    d: np.ndarray
    ustar: np.ndarray
    j: int
    u0: np.ndarray
    hum: hum.HumConfig
    fixed_point: FixedPointConfig
    staircase: StaircaseConfig
    trials: int
    k_max: int
    stride: int
    plot_times: list[float]
    plot_fields: list[str]


def _guard(key, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ValueError, KeyError, ArithmeticError) as exc:
        raise ConfigError(key, str(exc)) from None


def _initial(r: _Reader, dom: Domain1D, ustar, seed: int, base: Path) -> np.ndarray:
    kind = r.raw("initial", "type", "constant")
    x = dom.x
    if kind == "constant":
        v = r.vec("initial", "value", 4, ustar)
        return np.repeat(v[:, None], dom.n, axis=1)
    if kind == "constant-plus-bump":
        v = r.vec("initial", "value", 4, ustar)
        amp = r.vec("initial", "bump_amplitude", 4)
        c = r.float("initial", "bump_center", 0.3 * dom.L)
        w = r.float("initial", "bump_width", 0.1 * dom.L)
        if not w > 0:
            raise ConfigError("initial.bump_width", "must be positive")
        return v[:, None] + amp[:, None] * np.exp(-(((x - c) / w) ** 2))[None, :]
    if kind == "random":
        lo = r.float("initial", "low", 0.0)
        hi = r.float("initial", "high", 1.0)
        if not lo < hi:
            raise ConfigError("initial.low", "need low < high")
        return np.random.default_rng(seed).uniform(lo, hi, size=(4, dom.n))
    if kind == "file":
        path = Path(r.raw("initial", "path"))
        path = path if path.is_absolute() else base / path
        try:
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        except OSError as exc:
            raise ConfigError("initial.path", str(exc)) from None
        if data.shape != (dom.n, 4):
            raise ConfigError("initial.path", f"expected {dom.n} rows of u1,u2,u3,u4, got {data.shape}")
        return data.T.copy()
    raise ConfigError("initial.type", f"unknown type {kind!r}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError("file", str(exc)) from None
    r = _Reader(cp)
    kind = r.raw("experiment", "kind")
    if kind not in KINDS:
        raise ConfigError("experiment.kind", f"unknown kind {kind!r}; expected one of {KINDS}")
    out = Path(r.raw("experiment", "output", "out"))
    out = out if out.is_absolute() else path.parent / out
    seed = r.int("experiment", "seed", 0)

    def window(key, default):
        return tuple(r.vec("domain", key, 2, default))

    dom = _guard("domain", Domain1D, r.float("domain", "L", 1.0), r.int("domain", "n", 101),
                 window("omega", (0.3, 0.7)), window("omega0", (0.35, 0.65)),
                 window("omega_inner", (0.4, 0.6)))
    tg = _guard("time", TimeGrid, r.float("time", "T", 1.0), r.int("time", "m", 200))
    d = _guard("system.d", structure.as_diffusion, r.vec("system", "d", 4, (1, 2, 3, 4)))
    ustar = _guard("system.ustar", structure.as_ustar, r.vec("system", "ustar", 4, (1, 1, 1, 1)))
    if not structure.is_stationary(ustar):
        raise ConfigError("system.ustar", f"{tuple(ustar)} is not stationary (u1 u3 != u2 u4)")
    j = r.int("system", "j", 3)
    if j not in (1, 2, 3):
        raise ConfigError("system.j", f"must be 1, 2 or 3, got {j}")
    u0 = _initial(r, dom, ustar, seed, path.parent)
    if not np.all(np.isfinite(u0)):
        raise ConfigError("initial", "initial state is not finite")

    hc = _guard("hum", hum.HumConfig, r.float("hum", "epsilon", 1e-6), r.float("hum", "lambda", 2.0),
                r.opt_float("hum", "s"), (r.float("hum", "t1", 0.2), r.float("hum", "t2", 0.8)),
                r.float("hum", "cg_tol", 1e-8), r.int("hum", "cg_maxiter", 500),
                r.bool("hum", "normalize", True))
    if hc.lam < 1:
        raise ConfigError("hum.lambda", "must be >= 1")
    if hc.s is not None and not hc.s > 0:
        raise ConfigError("hum.s", "must be positive")
    fp = _guard("fixed_point", FixedPointConfig,
                r.int("fixed_point", "max_outer_iterations", 15),
                r.float("fixed_point", "contraction_tol", 1e-8), r.opt_float("fixed_point", "nu"),
                r.float("fixed_point", "delta0", 0.05),
                r.float("fixed_point", "return_amplitude", 4.0))
    sc = _guard("staircase", StaircaseConfig,
                r.float("staircase", "settle_tol", 1e-3),
                r.float("staircase", "settle_max_time", 200.0),
                r.float("staircase", "initial_theta_step", 1.0),
                r.float("staircase", "min_theta_step", 1.0 / 64),
                r.float("staircase", "leg_tol", 1e-3), r.float("staircase", "T_leg", 1.0),
                r.int("staircase", "m_leg", 200), r.float("staircase", "detour_radius", 0.2))
    trials = r.int("observability", "trials", 8)
    if trials < 1:
        raise ConfigError("observability.trials", "must be >= 1")
    k_max = r.int("kalman", "k_max", 64)
    if k_max < 1:
        raise ConfigError("kalman.k_max", "must be >= 1")
    stride = r.int("output", "stride", 1)
    if stride < 1:
        raise ConfigError("output.stride", "must be >= 1")
    times = [float(s) for s in r.raw("output", "plot_times", "").replace(",", " ").split()]
    fields = r.raw("output", "plot_fields", "u1 u2 u3 u4").replace(",", " ").split()
    allowed = ["u1", "u2", "u3", "u4"] + [f"h{i + 1}" for i in range(j)]
    bad = [f for f in fields if f not in allowed]
    if bad:
        raise ConfigError("output.plot_fields", f"unknown field(s) {bad}; allowed {allowed}")

    if kind in ("control-local", "control-global", "control-linear"):
        v = structure.admissible(u0, j, d, ustar, dom)
        if not v:
            raise ConfigError("initial", "not admissible for the target: " + ", ".join(v.violations))
    if kind == "control-global" and np.any(u0 < 0):
        raise ConfigError("initial", "global control needs a nonnegative initial state")
    return ExperimentConfig(kind, out, seed, dom, tg, d, ustar, j, u0, hc, fp, sc, trials, k_max,
                            stride, times, fields)


# ---------------------------------------------------------------------------
# output

def _write_csv(path: Path, header: list[str], rows) -> None:
    rows = np.asarray(rows, float).reshape(-1, len(header))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, rows, fmt=FMT, delimiter=",", newline="\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FMT % v
    return str(v).replace("\n", " ")


def write_summary(path: Path, items: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {_fmt(v)}\n")


def write_trajectory(path: Path, traj: Trajectory | None, j: int = 0, stride: int = 1) -> None:
    """Rows (t, x, u1..u4, h1..hj); row k carries the control applied on step k (0 at t = T)."""
    header = ["t", "x", "u1", "u2", "u3", "u4"] + [f"h{i + 1}" for i in range(j)]
    if traj is None:
        _write_csv(path, header, np.zeros((0, len(header))))
        return
    tg, dom = traj.timegrid, traj.dom
    ks = np.arange(0, tg.m + 1, stride)
    if ks[-1] != tg.m:
        ks = np.append(ks, tg.m)
    n = dom.n
    h = np.zeros((tg.m + 1, j, n))
    h[: tg.m, : traj.controls.shape[1]] = traj.controls[:, :j]
    t = np.repeat(tg.t[ks], n)
    x = np.tile(dom.x, ks.size)
    cols = [t, x] + [traj.states[ks, i].ravel() for i in range(4)] + [h[ks, i].ravel() for i in range(j)]
    _write_csv(path, header, np.column_stack(cols))


def emit_plotdata(traj: Trajectory, fields, times, outdir) -> list[Path]:
    """One CSV per requested time: column x followed by the requested fields."""
    fields = list(fields)
    j = traj.controls.shape[1]
    for f in fields:
        if f in ("u1", "u2", "u3", "u4"):
            continue
        if f.startswith("h") and f[1:].isdigit():
            i = int(f[1:])
            if i > 3:
                raise ValueError(f"unknown field {f!r}: controls have at most 3 components")
            if i < 1 or i > j:
                raise ValueError(f"unknown field {f!r}: this run has {j} control(s)")
            continue
        raise ValueError(f"unknown field {f!r}")
    tg = traj.timegrid
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in times:
        if not -1e-12 <= t <= tg.T + 1e-12:
            raise ValueError(f"time {t} outside [0, {tg.T}]")
        k = tg.index(t)
        cols = [traj.dom.x]
        for f in fields:
            if f[0] == "u":
                cols.append(traj.states[k, int(f[1]) - 1])
            else:
                cols.append(traj.controls[min(k, tg.m - 1), int(f[1]) - 1]
                            if k < tg.m else np.zeros(traj.dom.n))
        p = outdir / f"snapshot_{k:06d}.csv"
        _write_csv(p, ["x"] + fields, np.column_stack(cols))
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# experiments

def _invariant_rows(rep, tg):
    names = list(rep.series)
    return ["t"] + [f"mass_{k.replace('+', '')}" for k in names], \
        np.column_stack([tg.t] + [rep.series[k] for k in names])


def _run_simulate(c: ExperimentConfig, summary: dict):
    traj = simulate_nonlinear(c.u0, c.tg, c.d, c.dom)
    rep = structure.invariant_report(traj, 3, c.d)
    header, rows = _invariant_rows(rep, c.tg)
    for k, v in rep.drift.items():
        summary[f"mass_drift_{k.replace('+', '')}"] = v
    if c.kind == "invariants":
        for k, v in rep.pointwise.items():
            summary[f"pointwise_{k}"] = v
        z = structure.asymptotic_state(c.u0, c.dom) if np.all(c.u0 >= 0) else None
        if z is not None:
            for i in range(4):
                summary[f"z{i + 1}"] = z[i]
            summary["distance_to_z"] = float(np.max(np.abs(traj.final - z[:, None])))
    summary["terminal_linf_error"] = float(np.max(np.abs(traj.final - c.ustar[:, None])))
    return traj, 0, header, rows


def _run_kalman(c: ExperimentConfig, summary: dict):
    res = structure.kalman_rank(c.d, c.ustar, c.j, c.k_max, c.dom.L)
    summary["controllable"] = res.controllable
    summary["min_rank"] = int(res.ranks.min())
    summary["max_rank"] = int(res.ranks.max())
    rows = np.column_stack([np.arange(res.ranks.size), res.eigenvalues, res.ranks])
    return None, 0, ["k", "lambda_k", "rank"], rows


def _run_weights(c: ExperimentConfig, summary: dict):
    T = c.tg.T
    w = carleman.build_weights(c.dom, T, c.j, c.hum.lam, c.hum.s)
    t = c.tg.t[1:-1]
    x = c.dom.x
    phi = w.phi(t[:, None], x[None, :])
    alpha = w.alpha(t[:, None], x[None, :])
    lr = w.log_multiplier(t, x)
    rho = carleman.hum_multiplier(w, t, x)
    summary["s"] = w.s
    summary["lambda"] = w.lam
    summary["M"] = w.M
    summary["max_alpha"] = float(alpha.max())
    summary["max_log_rho"] = float(lr.max())
    summary["endpoint_rho"] = float(max(rho[0].max(), rho[-1].max()))
    rows = np.column_stack([np.repeat(t, x.size), np.tile(x, t.size), phi.ravel(), alpha.ravel(),
                            lr.ravel(), rho.ravel()])
    return None, 0, ["t", "x", "phi", "alpha", "log_rho", "rho"], rows


def _linear_setup(c: ExperimentConfig):
    system = structure.build_transformed_system(c.j, c.d, c.ustar)
    z0 = system.to_zeta(c.u0)
    return system, system.coupling_at_zero(), z0


def _run_control_linear(c: ExperimentConfig, summary: dict):
    system, G, z0 = _linear_setup(c)
    res = hum.three_phase_control(z0, c.hum.problem(system, G, c.tg, c.dom, z0))
    h = res.hum
    summary.update(terminal_norm=res.terminal_norm, norm_at_t2=res.norm_at_t2,
                   weighted_control_norm2=h.weighted_control_norm2,
                   linf_control_norm=h.linf_control_norm, cg_iterations=h.cg_iterations,
                   optimality_residual=h.optimality_residual, converged=h.converged,
                   stagnated=h.stagnated, J=h.J, J0=h.J0, hj_residual=h.hj_residual)
    lin = res.trajectory
    states = system.reference()[None] + system.inverse_map(lin.states)
    traj = Trajectory(lin.timegrid, lin.dom, states, lin.controls)
    rows = np.column_stack([np.arange(len(h.residual_history)), h.residual_history])
    return traj, c.j, ["iteration", "relative_residual"], rows


def _run_control_local(c: ExperimentConfig, summary: dict):
    try:
        traj, rep = local_control(c.u0, c.ustar, c.j, c.d, c.dom, c.tg, c.fixed_point, c.hum)
    except FixedPointError as exc:
        _fp_summary(summary, exc.report)
        raise
    _fp_summary(summary, rep)
    n = len(rep.contraction)
    margins = (rep.key_entry_margin + [np.nan] * n)[:n]
    rows = np.column_stack([np.arange(1, n + 1), rep.contraction, rep.cg_iterations, margins])
    return traj, traj.controls.shape[1], ["iteration", "contraction", "cg_iterations",
                                          "key_entry_margin"], rows


def _fp_summary(summary, rep):
    summary.update(converged=rep.converged, iterations=rep.iterations, nu=rep.nu,
                   max_iterate=rep.max_iterate, terminal_linf_error=rep.terminal_linf_error,
                   linear_terminal_norm=rep.linear_terminal_norm,
                   self_consistency=rep.self_consistency, return_method=rep.return_method,
                   within_delta0=rep.within_delta0, target_kind=rep.target_kind)


def _run_control_global(c: ExperimentConfig, summary: dict):
    try:
        traj, log = global_control(c.u0, c.ustar, c.j, c.d, c.dom, c.staircase, c.fixed_point, c.hum)
    except StaircaseError as exc:
        summary["legs"] = len(exc.log.legs)
        raise
    summary.update(z1=log.z[0], z2=log.z[1], z3=log.z[2], z4=log.z[3],
                   settle_time=log.settle_time, settle_distance=log.settle_distance,
                   legs=len(log.legs), accepted_legs=len(log.accepted),
                   final_theta=log.thetas[-1] if log.thetas else 0.0,
                   terminal_linf_error=float(np.max(np.abs(traj.final - c.ustar[:, None]))),
                   horizon=traj.timegrid.T)
    kinds = {"to_z": 0, "walk": 1, "detour_exit": 2}
    rows = [[leg.index, kinds[leg.kind], leg.theta, leg.dtheta, leg.t_start, leg.t_end,
             leg.terminal_error, leg.iterations, float(leg.accepted)] + list(leg.target)
            for leg in log.legs]
    header = ["leg", "kind", "theta", "dtheta", "t_start", "t_end", "terminal_error",
              "iterations", "accepted", "v1", "v2", "v3", "v4"]
    summary["leg_kind_codes"] = "0=to_z 1=walk 2=detour_exit"
    return traj, c.j, header, np.asarray(rows, float).reshape(-1, len(header))


def _run_observability(c: ExperimentConfig, summary: dict):
    system, G, z0 = _linear_setup(c)
    z0 = np.zeros_like(z0)
    p = c.hum.problem(system, G, c.tg, c.dom, z0)
    st = hum.observability_probe(p, c.trials, c.seed)
    summary.update(max_ratio=st.max_ratio, trials=c.trials, skipped=st.skipped)
    rows = np.column_stack([np.arange(len(st.ratios)), st.ratios])
    return None, 0, ["trial", "ratio"], rows


_RUNNERS = {"simulate": _run_simulate, "invariants": _run_simulate, "kalman": _run_kalman,
            "weights": _run_weights, "control-linear": _run_control_linear,
            "control-local": _run_control_local, "control-global": _run_control_global,
            "observability": _run_observability}


def run(path) -> int:
    """Execute one experiment; returns the process exit status."""
    try:
        c = load_config(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        c.output.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"config error: [experiment.output] {exc}", file=sys.stderr)
        return 2
    summary = {"kind": c.kind, "seed": c.seed}
    status = 0
    try:
        traj, j, header, rows = _RUNNERS[c.kind](c, summary)
        summary["status"] = "ok"
        write_trajectory(c.output / "trajectory.csv", traj, j, c.stride)
        _write_csv(c.output / "diagnostics.csv", header, rows)
        if traj is not None and c.plot_times:
            emit_plotdata(traj, c.plot_fields, c.plot_times, c.output / "plotdata")
    except Exception as exc:  # runtime failures are reported, not raised
        summary["status"] = "error"
        summary["error_type"] = type(exc).__name__
        summary["error"] = str(exc)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if not isinstance(exc, (FixedPointError, StaircaseError, InadmissibleError, ArithmeticError)):
            traceback.print_exc()
        status = 1
    write_summary(c.output / "summary", summary)
    return status


def validate(path) -> int:
    try:
        c = load_config(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"ok: kind = {c.kind}")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="rdcontrol", description="Reaction-diffusion control experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name, help_ in (("run", "run an experiment"), ("validate", "check a config file")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config")
    a = ap.parse_args(argv)
    return run(a.config) if a.cmd == "run" else validate(a.config)


if __name__ == "__main__":
    raise SystemExit(main())
