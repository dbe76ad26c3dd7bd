"""Forward and adjoint time marching.

One step of the linear scheme reads

    (I - dt D (x) Lap) z^{k+1} = (I + dt A_k) z^k + dt B h^k 1_omega,

with D lower triangular, so the implicit part is solved component by
component.  The adjoint sweep is the transpose of this map in the
quadrature-weighted inner product, which makes the pairing

    <z^m, psi^m> = <z^0, psi^0> + dt * sum_k <B h^k 1_omega, chi^k>

hold to round-off.  ``chi^k`` is the adjoint state that pairs with the
control applied on step k.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid import Domain1D, window_mask

GUARD = 1e12


class BlowUpError(RuntimeError):
    def __init__(self, step: int, t: float):
        super().__init__(f"blow-up: |value| > {GUARD:g} at step {step} (t = {t:.6g})")
        self.step = step
        self.t = t


@dataclass(frozen=True)
class TimeGrid:
    T: float
    m: int

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"m must be >= 2, got {self.m}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.m

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.m + 1)

    def index(self, t: float) -> int:
        """Nearest step index to time ``t``."""
        return int(np.clip(np.floor(t / self.dt + 0.5), 0, self.m))


@dataclass
class Trajectory:
    """States ``(m+1, 4, n)`` and controls ``(m, j, n)`` (``j`` may be 0)."""

    timegrid: TimeGrid
    dom: Domain1D
    states: np.ndarray
    controls: np.ndarray

    @property
    def j(self) -> int:
        return self.controls.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class AdjointTrajectory:
    """Adjoint states ``psi`` (m+1, 4, n) and control-pairing states ``chi`` (m, 4, n)."""

    timegrid: TimeGrid
    dom: Domain1D
    psi: np.ndarray
    chi: np.ndarray


@dataclass(frozen=True)
class CouplingField:
    """Pointwise 4x4 coupling ``A[k, :, :, x]``.

    ``values`` has shape ``(mA, 4, 4, nA)`` with ``mA`` in {1, m} and
    ``nA`` in {1, n}; size-1 axes broadcast (constant fast path).
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=float)
        if v.ndim != 4 or v.shape[1:3] != (4, 4):
            raise ValueError(f"coupling must have shape (mA, 4, 4, nA), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("coupling has non-finite entries")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, M) -> CouplingField:
        return cls(np.asarray(M, dtype=float).reshape(1, 4, 4, 1))

    @classmethod
    def zero(cls) -> CouplingField:
        return cls.constant(np.zeros((4, 4)))

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def at(self, k: int) -> np.ndarray:
        return self.values[k if self.values.shape[0] > 1 else 0]

    def window(self, k1: int, k2: int) -> CouplingField:
        """Restriction to steps k1..k2-1."""
        if self.values.shape[0] == 1:
            return self
        return CouplingField(self.values[k1:k2])


def reaction_rhs(u: np.ndarray) -> np.ndarray:
    """(-1)^i (u1 u3 - u2 u4) for i = 1..4."""
    u = np.asarray(u, dtype=float)
    r = u[0] * u[2] - u[1] * u[3]
    return np.stack([-r, r, -r, r])


def expand_controls(controls: np.ndarray | None, m: int, dom: Domain1D) -> np.ndarray:
    """Embed ``(m, j, n)`` controls as a ``(m, 4, n)`` source masked to omega."""
    if controls is None or controls.shape[1] == 0:
        return np.zeros((0, 4, dom.n))
    c = np.asarray(controls, dtype=float)
    if c.shape[0] != m or c.shape[2] != dom.n or c.shape[1] > 3:
        raise ValueError(f"controls must have shape ({m}, j<=3, {dom.n}), got {c.shape}")
    src = np.zeros((m, 4, dom.n))
    src[:, : c.shape[1]] = c * window_mask(dom, "omega")
    return src


def _empty_controls(m, j, n):
    return np.zeros((m, j, n))


def step_imex(u: np.ndarray, dt: float, D, source: np.ndarray, dom: Domain1D,
              A: CouplingField | None = None) -> np.ndarray:
    """One IMEX step with implicit lower-triangular diffusion D and explicit ``A u + source``."""
    D = np.asarray(D, dtype=float)
    if np.any(np.triu(D, 1) != 0):
        raise ValueError("D must be lower triangular")
    if np.any(np.diag(D) <= 0):
        raise ValueError("diagonal of D must be positive")
    A = A or CouplingField.zero()
    src = np.asarray(source, dtype=float).reshape(1, 4, dom.n)
    states, bad = _kernels.linear_forward(np.asarray(u, dtype=float), D, A.values, src,
                                          dt, dom.dx, 1, GUARD)
    if bad >= 0:
        raise BlowUpError(bad, dt)
    return states[1]


def simulate_nonlinear(u0, tg: TimeGrid, d, dom: Domain1D, controls=None) -> Trajectory:
    """March the reaction-diffusion system with diffusion ``d`` and optional controls."""
    u0 = np.array(u0, dtype=float)
    if u0.shape != (4, dom.n):
        u0 = np.broadcast_to(u0.reshape(4, -1), (4, dom.n)).copy()
    if not np.all(np.isfinite(u0)):
        raise ValueError("u0 must be finite")
    d = np.asarray(d, dtype=float)
    src = expand_controls(controls, tg.m, dom)
    states, bad = _kernels.nonlinear_forward(u0, d, src, tg.dt, dom.dx, tg.m, GUARD)
    if bad >= 0:
        raise BlowUpError(bad, bad * tg.dt)
    j = 0 if controls is None else controls.shape[1]
    ctrl = _empty_controls(tg.m, j, dom.n) if controls is None else np.asarray(controls, float)
    return Trajectory(tg, dom, states, ctrl * window_mask(dom) if j else ctrl)


def simulate_linear(z0, tg: TimeGrid, sys, A: CouplingField, dom: Domain1D,
                    controls=None) -> Trajectory:
    """March the linear system with matrix ``sys.D`` and coupling ``A``."""
    z0 = np.array(z0, dtype=float).reshape(4, dom.n)
    if controls is not None and controls.shape[1] != sys.j:
        raise ValueError(f"expected {sys.j} control components, got {controls.shape[1]}")
    src = expand_controls(controls, tg.m, dom)
    states, bad = _kernels.linear_forward(z0, np.asarray(sys.D, float), A.values, src,
                                          tg.dt, dom.dx, tg.m, GUARD)
    if bad >= 0:
        raise BlowUpError(bad, bad * tg.dt)
    ctrl = _empty_controls(tg.m, sys.j, dom.n) if controls is None else src[:, : sys.j]
    return Trajectory(tg, dom, states, ctrl)


def simulate_adjoint(phiT, tg: TimeGrid, sys, A: CouplingField, dom: Domain1D) -> AdjointTrajectory:
    """Exact discrete adjoint of :func:`simulate_linear`, marched from ``phiT`` at t = T."""
    phiT = np.array(phiT, dtype=float).reshape(4, dom.n)
    psi, chi = _kernels.linear_adjoint(phiT, np.asarray(sys.D, float), A.values,
                                       tg.dt, dom.dx, tg.m)
    return AdjointTrajectory(tg, dom, psi, chi)


def spacetime_inner(a: np.ndarray, b: np.ndarray, dom: Domain1D, dt: float) -> float:
    """dt * sum over steps of the quadrature inner product; arrays (m, c, n)."""
    return float(dt * np.sum(a * b * dom.weights))


def duality_check(sys, A: CouplingField, tg: TimeGrid, h: np.ndarray, phiT, dom: Domain1D) -> float:
    """Relative mismatch between <zeta_h(T), phiT> and <h, chi> over (0,T) x omega."""
    h = np.asarray(h, dtype=float)
    fwd = simulate_linear(np.zeros((4, dom.n)), tg, sys, A, dom, h)
    adj = simulate_adjoint(phiT, tg, sys, A, dom)
    hm = fwd.controls
    lhs = float(np.sum(fwd.final * adj.psi[-1] * dom.weights))
    rhs = spacetime_inner(hm, adj.chi[:, : sys.j], dom, tg.dt)
    scale = (np.sqrt(np.sum(fwd.final**2 * dom.weights) * np.sum(adj.psi[-1] ** 2 * dom.weights))
             + np.sqrt(spacetime_inner(hm, hm, dom, tg.dt)
                       * spacetime_inner(adj.chi, adj.chi, dom, tg.dt)))
    if scale == 0.0:
        return 0.0
    return abs(lhs - rhs) / scale
