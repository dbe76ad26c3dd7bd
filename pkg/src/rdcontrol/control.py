"""Nonlinear controllers built on the linear HUM solver.

``local_control`` runs a Picard iteration on the frozen-coupling linear
problem and always checks the outcome with a fresh nonlinear simulation.
``degenerate_control`` handles targets whose vanishing entries decouple the
system.  ``global_control`` lets the free system settle, then walks a path of
constant stationary states with adaptive steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Domain1D, window_mask
from .hum import HumConfig, three_phase_control
from .simulate import BlowUpError, TimeGrid, Trajectory, simulate_nonlinear
from .structure import (admissible, as_diffusion, as_ustar, asymptotic_state,
                        build_return_trajectory, build_transformed_system, classify_target,
                        is_stationary)


class InadmissibleError(ValueError):
    def __init__(self, violations, residuals=None):
        self.violations = list(violations)
        self.residuals = dict(residuals or {})
        super().__init__("initial state is not admissible: " + ", ".join(self.violations))


class FixedPointError(RuntimeError):
    """Picard iteration failure; the partial report is attached."""

    def __init__(self, message: str, report: "FixedPointReport"):
        super().__init__(message)
        self.report = report


class StaircaseError(RuntimeError):
    def __init__(self, message: str, log: "LegLog"):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class FixedPointConfig:
    """Picard knobs.  ``return_amplitude`` is the height of the return-method
    bump; the coupling that reaches the fourth component scales with it."""

    max_outer_iterations: int = 15
    contraction_tol: float = 1e-8
    nu: float | None = None
    delta0: float = 0.05
    return_amplitude: float = 4.0

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if not self.contraction_tol > 0 or not self.delta0 > 0:
            raise ValueError("tolerances must be positive")
        if self.nu is not None and not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.return_amplitude > 0:
            raise ValueError("return_amplitude must be positive")

    def radius(self, ustar) -> float:
        return self.nu if self.nu is not None else 10.0 * float(np.max(ustar)) + 1.0


@dataclass(frozen=True)
class StaircaseConfig:
    settle_tol: float = 1e-3
    settle_max_time: float = 200.0
    initial_theta_step: float = 1.0
    min_theta_step: float = 1.0 / 64
    leg_tol: float = 1e-3
    T_leg: float = 1.0
    m_leg: int = 200
    detour_radius: float = 0.2

    def __post_init__(self):
        if not 0 < self.min_theta_step <= self.initial_theta_step <= 1:
            raise ValueError("need 0 < min_theta_step <= initial_theta_step <= 1")
        for name in ("settle_tol", "settle_max_time", "leg_tol", "T_leg", "detour_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.m_leg < 2:
            raise ValueError("m_leg must be >= 2")


@dataclass
class FixedPointReport:
    converged: bool
    iterations: int
    contraction: list[float]
    nu: float
    max_iterate: float
    terminal_linf_error: float
    linear_terminal_norm: float
    cg_iterations: list[int]
    key_entry_margin: list[float]
    self_consistency: float
    return_method: bool
    within_delta0: bool
    target_kind: str
    message: str = ""


_ZERO_ROWS = {"u3+u4": [3], "generic": [2, 3], "reduced": [2, 3]}


def _key_region(system, tg: TimeGrid, dom: Domain1D, k1: int, k2: int):
    """(steps, grid mask, sign) on which the key coupling entry must keep its sign."""
    key = system.key_entry()
    if key is None:
        return None
    ref = system.coupling_at_zero(tg.m, dom.n).values
    ref = np.broadcast_to(ref, (tg.m, 4, 4, dom.n))[k1:k2, key[0], key[1]]
    w0 = window_mask(dom, "omega0") > 0
    peak = float(np.max(np.abs(ref[:, w0])))
    if peak == 0.0:
        return None
    sel = (np.abs(ref) >= 0.5 * peak) & w0[None, :]
    return key, sel, float(np.sign(ref[sel][0]))


def _check_class(system, G, region, k1, k2) -> float:
    """Signed margin of the key entry on its region; zero-sign rows must vanish."""
    v = G.values
    if np.any(v[:, _ZERO_ROWS.get(system.branch, [])] != 0.0):
        return -np.inf
    v = np.broadcast_to(v, (max(v.shape[0], k2),) + v.shape[1:])
    if region is None:
        return np.inf
    (r, c), sel, sgn = region
    ent = np.broadcast_to(v[k1:k2, r, c], sel.shape)
    return float(np.min(sgn * ent[sel]))


def local_control(u0, ustar, j: int, d, dom: Domain1D, tg: TimeGrid,
                  cfg: FixedPointConfig = FixedPointConfig(), hum: HumConfig = HumConfig(),
                  branch: str = "auto") -> tuple[Trajectory, FixedPointReport]:
    """Steer u0 to ustar on (0, T) and verify by a nonlinear re-simulation.

    The iteration is z^0 = 0, z^{k+1} = three-phase HUM solution of the
    linear system with coupling G(z^k).  Raises :class:`InadmissibleError`
    before any work, and :class:`FixedPointError` when an iterate leaves the
    nu-ball, the frozen coupling leaves its sign class, or the cap is hit.
    """
    d = as_diffusion(d)
    us = as_ustar(ustar)
    u0 = np.broadcast_to(np.asarray(u0, float).reshape(4, -1), (4, dom.n)).copy()
    verdict = admissible(u0, j, d, us, dom)
    if not verdict:
        raise InadmissibleError(verdict.violations, verdict.residuals)
    kind = classify_target(us, j)
    if kind in ("j2-degenerate", "j1-degenerate"):
        traj, rep = degenerate_control(u0, us, j, d, dom, tg, hum)
        return traj, rep

    t1, t2 = hum.window[0] * tg.T, hum.window[1] * tg.T
    ret = None
    if kind == "j3-return-method":
        ret = build_return_trajectory(tg, dom, d[2], cfg.return_amplitude, window=(t1, t2))
    system = build_transformed_system(j, d, us, branch=branch, ret=ret)
    nu = cfg.radius(us)
    z0 = system.to_zeta(u0, 0)
    k1, k2 = tg.index(t1), tg.index(t2)
    region = _key_region(system, tg, dom, k1, k2)

    z = np.zeros((tg.m + 1, 4, dom.n))
    rep = FixedPointReport(False, 0, [], nu, 0.0, np.nan, np.nan, [], [], np.nan, ret is not None,
                           bool(np.max(np.abs(u0 - us[:, None])) <= cfg.delta0), kind)
    q = None
    h_prev = None
    res = None
    for it in range(1, cfg.max_outer_iterations + 1):
        G = system.coupling(z[:-1])
        margin = _check_class(system, G, region, k1, k2)
        rep.key_entry_margin.append(margin)
        if not margin > 0:
            rep.iterations = it - 1
            rep.message = "frozen coupling left its admissible class"
            raise FixedPointError(rep.message, rep)
        try:
            res = three_phase_control(z0, hum.problem(system, G, tg, dom, z0), q0=q)
        except BlowUpError as exc:
            rep.iterations = it
            rep.message = str(exc)
            raise FixedPointError(rep.message, rep) from exc
        q = res.hum.q
        znew = res.trajectory.states
        rep.cg_iterations.append(res.hum.cg_iterations)
        rep.iterations = it
        rep.max_iterate = float(np.max(np.abs(znew)))
        diff = float(np.max(np.abs(znew - z)))
        rep.contraction.append(diff)
        h = res.trajectory.controls
        if h_prev is not None:
            rep.self_consistency = float(np.max(np.abs(h - h_prev)))
        h_prev = h
        z = znew
        if rep.max_iterate > nu:
            rep.message = "outside fixed-point ball"
            raise FixedPointError(rep.message, rep)
        if diff <= cfg.contraction_tol:
            rep.converged = True
            break
    if not rep.converged:
        rep.message = f"no contraction after {cfg.max_outer_iterations} iterations"
        raise FixedPointError(rep.message, rep)

    controls = res.trajectory.controls.copy()
    if ret is not None:
        controls[:, 2] += ret.h3bar
    rep.linear_terminal_norm = res.terminal_norm
    try:
        traj = simulate_nonlinear(u0, tg, d, dom, controls)
    except BlowUpError as exc:
        rep.message = str(exc)
        raise FixedPointError(rep.message, rep) from exc
    rep.terminal_linf_error = float(np.max(np.abs(traj.final - us[:, None])))
    return traj, rep


def degenerate_control(u0, ustar, j: int, d, dom: Domain1D, tg: TimeGrid,
                       hum: HumConfig = HumConfig()) -> tuple[Trajectory, FixedPointReport]:
    """Targets with vanishing entries: the controlled components obey decoupled heat equations.

    The untouched components must start at their forced values; they are
    checked to stay there within 1e-12 along the nonlinear run.
    """
    d = as_diffusion(d)
    us = as_ustar(ustar)
    kind = classify_target(us, j)
    if kind not in ("j2-degenerate", "j1-degenerate"):
        raise ValueError(f"target {tuple(us)} is not degenerate for j = {j}")
    u0 = np.broadcast_to(np.asarray(u0, float).reshape(4, -1), (4, dom.n)).copy()
    verdict = admissible(u0, j, d, us, dom)
    needed = [v for v in verdict.violations if v.startswith("vanishing_target")]
    if needed:
        raise InadmissibleError(needed, verdict.residuals)
    if not verdict:
        raise InadmissibleError(verdict.violations, verdict.residuals)
    system = build_transformed_system(j, d, us, branch="decoupled")
    z0 = u0 - us[:, None]
    G = system.coupling_at_zero()
    res = three_phase_control(z0, hum.problem(system, G, tg, dom, z0))
    traj = simulate_nonlinear(u0, tg, d, dom, res.trajectory.controls)
    drift = float(np.max(np.abs(traj.states[:, j:] - u0[None, j:])))
    rep = FixedPointReport(True, 1, [0.0], np.inf, float(np.max(np.abs(res.trajectory.states))),
                           float(np.max(np.abs(traj.final - us[:, None]))), res.terminal_norm,
                           [res.hum.cg_iterations], [], 0.0, False, True, kind)
    if drift > 1e-12:
        rep.converged = False
        rep.message = f"uncontrolled components drifted by {drift:.3e}"
        raise FixedPointError(rep.message, rep)
    return traj, rep


# ---------------------------------------------------------------------------
# staircase

def gamma_path(z, ustar, theta: float) -> np.ndarray:
    """Stationary state on the segment from z to ustar, v1 = v2 v4 / v3."""
    z, us = np.asarray(z, float), np.asarray(ustar, float)
    v = (1.0 - theta) * z + theta * us
    if not v[2] > 0:
        raise ValueError("path needs v3 > 0")
    v[0] = v[1] * v[3] / v[2]
    return v


def detour_target(ustar, radius: float) -> np.ndarray:
    """Stationary state with positive third entry inside the radius-ball of ustar (u3* = 0)."""
    u1, u2, u3, u4 = as_ustar(ustar)
    if u3 != 0:
        raise ValueError("the detour is only needed when u3* = 0")
    r = radius / 2.0
    if u2 == 0:
        a, c = u1 + r, u4 + r
        beta = 0.5 * min(r, r * a / c)
        return np.array([a, beta, beta * c / a, c])
    a, b = u1 + r, u2 + r
    beta = 0.5 * min(r, r * a / b)
    return np.array([a, b, beta * b / a, beta])


@dataclass
class LegRecord:
    index: int
    kind: str
    theta: float
    dtheta: float
    target: np.ndarray
    t_start: float
    t_end: float
    terminal_error: float
    iterations: int
    accepted: bool
    message: str = ""


@dataclass
class LegLog:
    z: np.ndarray | None = None
    settle_time: float = 0.0
    settle_distance: float = np.nan
    legs: list[LegRecord] = field(default_factory=list)

    @property
    def thetas(self) -> list[float]:
        return [leg.theta for leg in self.legs if leg.accepted and leg.kind == "walk"]

    @property
    def accepted(self) -> list[LegRecord]:
        return [leg for leg in self.legs if leg.accepted]


class _Recorder:
    """Concatenates nonlinear pieces that share the time step."""

    def __init__(self, u0, dom, dt, j):
        self.states = [np.asarray(u0, float)[None]]
        self.controls = []
        self.dom, self.dt, self.j = dom, dt, j

    @property
    def t(self) -> float:
        return self.dt * sum(c.shape[0] for c in self.controls)

    @property
    def current(self) -> np.ndarray:
        return self.states[-1][-1]

    def add(self, traj: Trajectory):
        c = np.zeros((traj.timegrid.m, self.j, self.dom.n))
        c[:, : traj.controls.shape[1]] = traj.controls
        self.states.append(traj.states[1:])
        self.controls.append(c)

    def trajectory(self) -> Trajectory:
        m = sum(c.shape[0] for c in self.controls)
        tg = TimeGrid(self.dt * max(m, 2), max(m, 2))
        states = np.concatenate(self.states)
        controls = (np.concatenate(self.controls) if self.controls
                    else np.zeros((0, self.j, self.dom.n)))
        if m < 2:
            states = np.concatenate([states, np.repeat(states[-1:], 2 - m, axis=0)])
            controls = np.concatenate([controls, np.zeros((2 - m, self.j, self.dom.n))])
        return Trajectory(tg, self.dom, states, controls)


def global_control(u0, ustar, j: int, d, dom: Domain1D,
                   cfg: StaircaseConfig = StaircaseConfig(),
                   fp: FixedPointConfig = FixedPointConfig(),
                   hum: HumConfig = HumConfig()) -> tuple[Trajectory, LegLog]:
    """Settle freely near the large-time limit z, then walk stationary states to ustar."""
    d = as_diffusion(d)
    us = as_ustar(ustar)
    if not is_stationary(us):
        raise ValueError(f"{tuple(us)} is not stationary")
    u0 = np.broadcast_to(np.asarray(u0, float).reshape(4, -1), (4, dom.n)).copy()
    if np.any(u0 < 0):
        raise ValueError("global control needs a nonnegative initial state")
    verdict = admissible(u0, j, d, us, dom)
    if not verdict:
        raise InadmissibleError(verdict.violations, verdict.residuals)
    z = asymptotic_state(u0, dom)
    if us[2] == 0 and j != 3:
        raise ValueError("targets with u3* = 0 are reached through a detour that needs j = 3")
    log = LegLog(z=z)
    tg_leg = TimeGrid(cfg.T_leg, cfg.m_leg)
    rec = _Recorder(u0, dom, tg_leg.dt, j)

    dist = float(np.max(np.abs(u0 - z[:, None])))
    while dist > cfg.settle_tol:
        if rec.t + cfg.T_leg > cfg.settle_max_time + 1e-12:
            log.settle_time, log.settle_distance = rec.t, dist
            raise StaircaseError(f"settling cap {cfg.settle_max_time:g} exceeded "
                                 f"(distance {dist:.3e})", log)
        rec.add(simulate_nonlinear(rec.current, tg_leg, d, dom))
        dist = float(np.max(np.abs(rec.current - z[:, None])))
    log.settle_time, log.settle_distance = rec.t, dist

    def leg(kind, target, theta=np.nan, dtheta=np.nan):
        t0 = rec.t
        idx = len(log.legs)
        try:
            traj, rep = local_control(rec.current, target, j, d, dom, tg_leg, fp, hum)
        except (FixedPointError, InadmissibleError) as exc:
            log.legs.append(LegRecord(idx, kind, theta, dtheta, target, t0, t0, np.nan,
                                      getattr(getattr(exc, "report", None), "iterations", 0),
                                      False, str(exc)))
            return False
        ok = rep.terminal_linf_error <= cfg.leg_tol
        log.legs.append(LegRecord(idx, kind, theta, dtheta, target, t0, t0 + cfg.T_leg,
                                  rep.terminal_linf_error, rep.iterations, ok,
                                  "" if ok else "leg tolerance missed"))
        if ok:
            rec.add(traj)
        return ok

    same = 1e-12 * (1.0 + float(np.max(z)))
    if dist > same and not leg("to_z", z):
        raise StaircaseError("leg to the large-time limit failed: " + log.legs[-1].message, log)

    final = us
    if us[2] == 0:
        final = detour_target(us, cfg.detour_radius)
    if np.max(np.abs(final - z)) > same:
        theta, step = 0.0, cfg.initial_theta_step
        while theta < 1.0:
            nxt = min(1.0, theta + step)
            if leg("walk", gamma_path(z, final, nxt), nxt, nxt - theta):
                theta = nxt
                continue
            step /= 2.0
            if step < cfg.min_theta_step:
                raise StaircaseError(f"theta step underflow at theta = {theta:.6g}", log)
    if final is not us and not leg("detour_exit", us, 1.0, 0.0):
        raise StaircaseError("final leg from the detour state failed: " + log.legs[-1].message, log)
    return rec.trajectory(), log
