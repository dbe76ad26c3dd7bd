"""Penalized HUM by conjugate gradient on the factored control h = rho q.

The functional is

    J(q) = 1/2 <rho q, q> + |zeta_h(T)|^2 / (2 eps),

with <.,.> the space-time quadrature product over the control support.  In
the rho-weighted product its gradient is q - phi, where phi is the adjoint
state paired with the control and driven by -zeta_h(T)/eps.  J is
quadratic, so CG solves K q = f with K = I + L* L rho / eps, which is
self-adjoint and positive in that product.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .carleman import build_weights, multiplier_grid
from .grid import Domain1D, mean
from .simulate import GUARD, BlowUpError, CouplingField, TimeGrid, Trajectory


class HjMembershipError(ValueError):
    pass


@dataclass
class ControlProblem:
    """Linear null-control problem on ``timegrid`` with control on ``window`` x omega.

    ``window`` defaults to (0.2 T, 0.8 T); the Carleman weights live on that
    window.  ``normalize_weights`` rescales rho to peak value 1 (the raw
    multiplier underflows for the default s).
    """

    system: object
    coupling: CouplingField
    timegrid: TimeGrid
    dom: Domain1D
    z0: np.ndarray
    window: tuple[float, float] | None = None
    epsilon: float = 1e-6
    lam: float = 2.0
    s: float | None = None
    cg_tol: float = 1e-8
    cg_maxiter: int = 500
    normalize_weights: bool = True
    check_duality: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        T = self.timegrid.T
        if self.window is None:
            self.window = (0.2 * T, 0.8 * T)
        t1, t2 = self.window
        if not (0 <= t1 < t2 <= T):
            raise ValueError(f"window {self.window} must satisfy 0 <= t1 < t2 <= T")
        self.z0 = np.array(self.z0, dtype=float).reshape(4, self.dom.n)

    @property
    def j(self) -> int:
        return self.system.j

    def rho(self) -> np.ndarray:
        t1, t2 = self.window
        w = build_weights(self.dom, t2 - t1, self.j, self.lam, self.s, t0=t1)
        return multiplier_grid(w, self.timegrid.t[:-1], self.dom, self.normalize_weights)


@dataclass(frozen=True)
class HumConfig:
    """Knobs shared by every HUM solve of a control pipeline.

    ``window`` is given as fractions of the horizon so one config serves
    horizons of any length.
    """

    epsilon: float = 1e-6
    lam: float = 2.0
    s: float | None = None
    window: tuple[float, float] = (0.2, 0.8)
    cg_tol: float = 1e-8
    cg_maxiter: int = 500
    normalize_weights: bool = True

    def __post_init__(self):
        a, b = self.window
        if not (0 <= a < b <= 1):
            raise ValueError(f"window fractions {self.window} must satisfy 0 <= t1 < t2 <= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.cg_tol > 0 or self.cg_maxiter < 1:
            raise ValueError("cg_tol must be positive and cg_maxiter >= 1")

    def problem(self, system, coupling: CouplingField, tg: TimeGrid, dom: Domain1D,
                z0) -> "ControlProblem":
        a, b = self.window
        return ControlProblem(system, coupling, tg, dom, z0, window=(a * tg.T, b * tg.T),
                              epsilon=self.epsilon, lam=self.lam, s=self.s, cg_tol=self.cg_tol,
                              cg_maxiter=self.cg_maxiter, normalize_weights=self.normalize_weights)


@dataclass
class ControlResult:
    controls: np.ndarray
    states: np.ndarray
    terminal_norm: float
    weighted_control_norm2: float
    linf_control_norm: float
    cg_iterations: int
    optimality_residual: float
    converged: bool
    J: float
    J0: float
    hj_residual: float = 0.0
    stagnated: bool = False
    residual_history: list[float] = field(default_factory=list)
    duality_history: list[float] = field(default_factory=list)
    q: np.ndarray | None = None

    @property
    def terminal_state(self) -> np.ndarray:
        return self.states[-1]


class _Operators:
    """Forward and adjoint sweeps of one problem, with its inner products."""

    def __init__(self, p: ControlProblem):
        self.p = p
        self.D = np.asarray(p.system.D, dtype=float)
        self.A = p.coupling.values
        self.tg, self.dom = p.timegrid, p.dom
        self.j = p.j
        rho = p.rho()
        self.rho = np.repeat(rho[:, None, :], self.j, axis=1)
        self.active = self.rho > 0
        self.wst = self.tg.dt * self.dom.weights

    def ip_rho(self, a, b) -> float:
        return float(np.sum(self.rho * a * b * self.wst))

    def ip(self, a, b) -> float:
        return float(np.sum(a * b * self.wst))

    def l2(self, z) -> float:
        return float(np.sqrt(np.sum(z * z * self.dom.weights)))

    def forward(self, z0, h):
        src = np.zeros((self.tg.m, 4, self.dom.n))
        src[:, : self.j] = h
        states, bad = _kernels.linear_forward(z0, self.D, self.A, src, self.tg.dt,
                                              self.dom.dx, self.tg.m, GUARD)
        if bad >= 0:
            raise BlowUpError(bad, bad * self.tg.dt)
        return states

    def adjoint(self, psiT):
        _, chi = _kernels.linear_adjoint(psiT, self.D, self.A, self.tg.dt, self.dom.dx, self.tg.m)
        return np.where(self.active, chi[:, : self.j], 0.0)


def _hj_residual(p: ControlProblem) -> float:
    idx = list(p.system.mean_free)
    if not idx:
        return 0.0
    scale = max(float(np.max(np.abs(p.z0))), 1e-300)
    res = float(np.max(np.abs(mean(p.z0[idx], p.dom))))
    if res > 1e-9 * scale:
        raise HjMembershipError(
            f"initial perturbation has mean {res:.3e} in components {[i + 1 for i in idx]}; "
            "these means are conserved and cannot be steered")
    return res


def solve_penalized_hum(p: ControlProblem, q0: np.ndarray | None = None) -> ControlResult:
    """Minimize J by CG in the rho-weighted product, optionally warm-started at ``q0``.

    Means of the conserved components of z0 lie in the unobservable
    direction: they do not enter the gradient and are reported as
    ``hj_residual`` rather than removed.
    """
    hj = _hj_residual(p)
    op = _Operators(p)
    eps = p.epsilon
    m, j, n = p.timegrid.m, p.j, p.dom.n
    zero = np.zeros((4, n))

    free = op.forward(p.z0, np.zeros((m, j, n)))
    b = free[-1]
    J0 = op.l2(b) ** 2 / (2 * eps)
    f = -op.adjoint(b / eps)
    fnorm = np.sqrt(op.ip_rho(f, f))

    dual = []

    def K(v):
        y = op.forward(zero, op.rho * v)[-1]
        chi = op.adjoint(y / eps)
        if p.check_duality:
            lhs = float(np.sum(y * y * op.dom.weights)) / eps
            rhs = op.ip(op.rho * v, chi)
            dual.append(abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
        return v + chi

    q = np.zeros((m, j, n)) if q0 is None else np.where(op.active, q0, 0.0)
    history = []
    it = 0
    stagnated = False
    converged = fnorm == 0.0
    if not converged:
        r = f - K(q) if q0 is not None else f.copy()
        pdir = r.copy()
        rr = op.ip_rho(r, r)
        best, best_it = np.inf, 0
        while True:
            rnorm = np.sqrt(rr)
            history.append(float(rnorm / fnorm))
            hq = np.sqrt(op.ip(op.rho * q, op.rho * q))
            opt = np.sqrt(op.ip(op.rho * r, op.rho * r)) / hq if hq > 0 else np.inf
            if rnorm <= p.cg_tol * fnorm and opt <= p.cg_tol:
                converged = True
                break
            if rnorm < best:
                best, best_it = rnorm, it
            elif it - best_it >= 20:
                stagnated = True
                break
            if it >= p.cg_maxiter:
                break
            Kp = K(pdir)
            a = rr / op.ip_rho(pdir, Kp)
            q += a * pdir
            r -= a * Kp
            rr_new = op.ip_rho(r, r)
            pdir = r + (rr_new / rr) * pdir
            rr = rr_new
            it += 1

    h = op.rho * q
    states = op.forward(p.z0, h)
    zT = states[-1]
    phi = op.adjoint(-zT / eps)
    hn = np.sqrt(op.ip(h, h))
    resid = np.sqrt(op.ip(h - op.rho * phi, h - op.rho * phi)) / hn if hn > 0 else 0.0
    wn2 = op.ip_rho(q, q)
    return ControlResult(
        controls=h, states=states, terminal_norm=op.l2(zT), weighted_control_norm2=wn2,
        linf_control_norm=float(np.max(np.abs(h))) if h.size else 0.0, cg_iterations=it,
        optimality_residual=float(resid), converged=converged, J=0.5 * wn2 + op.l2(zT) ** 2 / (2 * eps),
        J0=J0, hj_residual=hj, stagnated=stagnated, residual_history=history,
        duality_history=dual, q=q)


@dataclass
class ThreePhaseResult:
    trajectory: Trajectory
    hum: ControlResult
    k1: int
    k2: int
    norm_at_t2: float
    terminal_norm: float


def three_phase_control(z0, p: ControlProblem, q0: np.ndarray | None = None) -> ThreePhaseResult:
    """Free march on (0, t1), HUM steering to zero at t2, free march on (t2, T)."""
    tg, dom = p.timegrid, p.dom
    k1, k2 = tg.index(p.window[0]), tg.index(p.window[1])
    if k2 - k1 < 3:
        raise ValueError("control window spans fewer than 3 steps")
    D = np.asarray(p.system.D, float)
    z0 = np.array(z0, dtype=float).reshape(4, dom.n)
    empty = np.zeros((0, 4, dom.n))

    def free(z, a, b):
        if b == a:
            return z[None]
        st, bad = _kernels.linear_forward(z, D, p.coupling.window(a, b).values, empty, tg.dt,
                                          dom.dx, b - a, GUARD)
        if bad >= 0:
            raise BlowUpError(a + bad, (a + bad) * tg.dt)
        return st

    head = free(z0, 0, k1)
    sub = ControlProblem(
        p.system, p.coupling.window(k1, k2), TimeGrid((k2 - k1) * tg.dt, k2 - k1), dom,
        head[-1], window=(0.0, (k2 - k1) * tg.dt), epsilon=p.epsilon, lam=p.lam, s=p.s,
        cg_tol=p.cg_tol, cg_maxiter=p.cg_maxiter, normalize_weights=p.normalize_weights,
        check_duality=p.check_duality)
    res = solve_penalized_hum(sub, q0)
    tail = free(res.states[-1], k2, tg.m)
    states = np.concatenate([head[:-1], res.states[:-1], tail])
    controls = np.zeros((tg.m, p.j, dom.n))
    controls[k1:k2] = res.controls
    w = dom.weights
    traj = Trajectory(tg, dom, states, controls)
    return ThreePhaseResult(traj, res, k1, k2, float(np.sqrt(np.sum(states[k2] ** 2 * w))),
                            float(np.sqrt(np.sum(states[-1] ** 2 * w))))


@dataclass
class ObservabilityStats:
    max_ratio: float
    ratios: list[float]
    skipped: int


def observability_probe(p: ControlProblem, trials: int = 8, seed: int = 0,
                        terminal_data=None) -> ObservabilityStats:
    """Ratio |phi(0)|^2 / sum_i <rho chi_i, chi_i> over random terminal data.

    Components whose means are conserved enter the left side with their mean
    removed.  ``terminal_data`` overrides the random draws; zero data count
    as skipped.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    op = _Operators(p)
    if terminal_data is None:
        rng = np.random.default_rng(seed)
        terminal_data = [rng.standard_normal((4, p.dom.n)) for _ in range(trials)]
    w = p.dom.weights
    ratios, skipped = [], 0
    for phiT in terminal_data:
        phiT = np.asarray(phiT, dtype=float).reshape(4, p.dom.n)
        psi, chi = _kernels.linear_adjoint(phiT, op.D, op.A, op.tg.dt, op.dom.dx, op.tg.m)
        phi0 = psi[0].copy()
        for i in p.system.mean_free:
            phi0[i] -= mean(phi0[i], p.dom)
        lhs = float(np.sum(phi0**2 * w))
        c = np.where(op.active, chi[:, : op.j], 0.0)
        rhs = op.ip_rho(c, c)
        if rhs == 0.0:
            skipped += 1
            continue
        ratios.append(lhs / rhs)
    return ObservabilityStats(max(ratios) if ratios else float("nan"), ratios, skipped)
