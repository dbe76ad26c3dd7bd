"""Algebra around the reaction-diffusion system.

Covers stationary states, conserved quantities, admissible initial data, the
linear changes of variables with their triangular diffusion matrices, the
coupling matrix G, the return-method reference trajectory, the large-time
limit and the Kalman test.

All changes of variables are pointwise linear maps ``v = P u``; the
perturbation is ``zeta = P (u - ubar)`` where ``ubar`` is the target state
(or, for the return method, the reference trajectory).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .grid import Domain1D, mean, neumann_laplacian, quadrature, window_mask
from .simulate import GUARD, CouplingField, TimeGrid, Trajectory

SIGNS = np.array([-1.0, 1.0, -1.0, 1.0])


def _same(a: float, b: float) -> bool:
    return bool(np.isclose(a, b, rtol=1e-12, atol=0.0))


def as_ustar(ustar) -> np.ndarray:
    u = np.asarray(ustar, dtype=float).reshape(4)
    if np.any(u < 0):
        raise ValueError(f"stationary state must be nonnegative, got {u}")
    return u


def as_diffusion(d) -> np.ndarray:
    d = np.asarray(d, dtype=float).reshape(4)
    if np.any(d <= 0):
        raise ValueError(f"diffusion coefficients must be positive, got {d}")
    return d


def is_stationary(ustar, tol: float | None = None) -> bool:
    u = as_ustar(ustar)
    p, q = u[0] * u[2], u[1] * u[3]
    if tol is None:
        tol = 1e-12 * (1.0 + abs(p))
    return bool(abs(p - q) <= tol)


def _require_stationary(ustar) -> np.ndarray:
    u = as_ustar(ustar)
    if not is_stationary(u):
        raise ValueError(f"{tuple(u)} is not stationary: u1*u3 != u2*u4")
    return u


# ---------------------------------------------------------------------------
# admissibility

@dataclass
class Verdict:
    admissible: bool
    violations: list[str] = field(default_factory=list)
    residuals: dict[str, float] = field(default_factory=dict)

    def __bool__(self):
        return self.admissible


def classify_target(ustar, j: int) -> str:
    u = as_ustar(ustar)
    if j == 3 and u[0] == 0 and u[2] == 0 and u[3] == 0:
        return "j3-return-method"
    if j == 2 and u[2] == 0 and u[3] == 0:
        return "j2-degenerate"
    if j == 1 and u[2] == 0:
        return "j1-degenerate"
    return "generic"


# (k, l, sign): the combination u_k + sign*u_l, 1-based labels
_PAIRS = {(2, 3): 1.0, (3, 4): 1.0, (2, 4): -1.0}


def _combo(u, k, l, sgn):
    return u[k - 1] + sgn * u[l - 1]


def admissible(u0, j: int, d, ustar, dom: Domain1D, tol: float = 1e-9) -> Verdict:
    """Check u0 against the conserved quantities that a j-control run cannot change.

    Violation names: ``mean_uk_plus_ul`` (mean mismatch),
    ``pointwise_uk_plus_ul`` / ``pointwise_uk_minus_ul`` (equal-diffusion
    pairs), and ``vanishing_target_*`` for targets with zero entries.
    """
    if j not in (1, 2, 3):
        raise ValueError(f"j must be 1, 2 or 3, got {j}")
    u0 = np.broadcast_to(np.asarray(u0, dtype=float).reshape(4, -1), (4, dom.n))
    d = as_diffusion(d)
    us = as_ustar(ustar)
    scale = 1.0 + float(np.max(np.abs(u0))) + float(np.max(us))
    out = Verdict(True)

    def need(name, resid):
        out.residuals[name] = float(resid)
        if resid > tol * scale:
            out.admissible = False
            out.violations.append(name)

    if j == 3:
        return out
    if j == 2:
        if us[2] == 0 and us[3] == 0:
            need("vanishing_target_u3_u4", np.max(np.abs(u0[2:])))
        if _same(d[2], d[3]):
            need("pointwise_u3_plus_u4", np.max(np.abs(u0[2] + u0[3] - us[2] - us[3])))
        else:
            need("mean_u3_plus_u4", abs(mean(u0[2] + u0[3], dom) - us[2] - us[3]))
        return out
    if us[2] == 0:
        if us[1] == 0:
            need("vanishing_target_u2_u3", max(np.max(np.abs(u0[1])), np.max(np.abs(u0[2])),
                                               np.max(np.abs(u0[3] - us[3]))))
        if us[3] == 0:
            need("vanishing_target_u3_u4", max(np.max(np.abs(u0[1] - us[1])),
                                               np.max(np.abs(u0[2])), np.max(np.abs(u0[3]))))
    for (k, l) in ((2, 3), (3, 4)):
        need(f"mean_u{k}_plus_u{l}", abs(mean(_combo(u0, k, l, 1.0), dom) - us[k - 1] - us[l - 1]))
    for (k, l), sgn in _PAIRS.items():
        if _same(d[k - 1], d[l - 1]):
            word = "plus" if sgn > 0 else "minus"
            need(f"pointwise_u{k}_{word}_u{l}",
                 np.max(np.abs(_combo(u0, k, l, sgn) - _combo(us, k, l, sgn))))
    return out


# ---------------------------------------------------------------------------
# transformed systems

@dataclass(frozen=True)
class ReturnTrajectory:
    """Reference u3 = g on the time grid and the source h3bar that carries it.

    ``g`` has shape (m+1, n), ``h3bar`` (m, n).  The pair is an exact
    trajectory of the discrete heat step with diffusion d3.
    """

    g: np.ndarray
    h3bar: np.ndarray
    window: tuple[float, float]


@dataclass
class TransformedSystem:
    """Diffusion matrix, control embedding and state maps for j controls.

    ``branch`` is ``identity`` (j=3), ``u3+u4`` (j=2), ``generic`` or
    ``reduced`` (j=1), or ``decoupled`` (plain heat equations, no coupling).
    For j=1 the fourth variable is ``c2 u2 + c3 u3 + c4 u4`` with
    ``c2 - c3 + c4 = 0``; the generic branch uses ``(alpha, beta, gamma)``.
    """

    j: int
    d: np.ndarray
    ustar: np.ndarray
    D: np.ndarray
    P: np.ndarray
    branch: str
    mean_free: tuple[int, ...]
    c: np.ndarray | None = None
    alpha_beta_gamma: tuple[float, float, float] | None = None
    ret: ReturnTrajectory | None = None

    @property
    def B(self) -> np.ndarray:
        return np.eye(4)[:, : self.j]

    def forward_map(self, u: np.ndarray) -> np.ndarray:
        """v = P u along the component axis; accepts (4,) or (..., 4, n)."""
        u = np.asarray(u, float)
        if u.ndim == 1:
            return self.P @ u
        return np.einsum("ij,...jn->...in", self.P, u)

    def inverse_map(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, float)
        if v.ndim == 1:
            return self.Pinv @ v
        return np.einsum("ij,...jn->...in", self.Pinv, v)

    @property
    def Pinv(self) -> np.ndarray:
        # closed-form inverses keep the round trip at the 1e-16 level
        Q = np.eye(4)
        if self.branch == "u3+u4":
            Q[3, 2] = -1.0
        elif self.branch in ("generic", "reduced"):
            c2, c3, c4 = self.c
            Q[2, 1] = -1.0
            Q[3, 1], Q[3, 2], Q[3, 3] = (c3 - c2) / c4, -c3 / c4, 1.0 / c4
        return Q

    def reference(self, k: int | None = None) -> np.ndarray:
        """Reference state ubar as (4, 1), or (4, n) at step k for the return method."""
        ref = self.ustar.reshape(4, 1).copy()
        if self.ret is not None:
            g = self.ret.g[0 if k is None else k]
            ref = np.broadcast_to(ref, (4, g.size)).copy()
            ref[2] = g
        return ref

    def to_zeta(self, u: np.ndarray, k: int = 0) -> np.ndarray:
        return np.einsum("ij,jn->in", self.P, np.asarray(u, float) - self.reference(k))

    def from_zeta(self, z: np.ndarray, k: int = 0) -> np.ndarray:
        return self.reference(k) + np.einsum("ij,jn->in", self.Pinv, np.asarray(z, float))

    def _rrow(self, z: np.ndarray, u3bar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row vector R(z) with reaction rate r = R(z).z, and the row sign pattern."""
        u1, u2, u3, u4 = self.ustar
        z1, z2, z3, z4 = (z[..., i, :] for i in range(4))
        one = np.ones_like(z1)
        if self.branch == "identity":
            row = (u3bar + z3, -(u4 + z4), u1 * one, -u2 * one)
            sg = SIGNS
        elif self.branch == "u3+u4":
            row = (u3 + z3, -(u4 + z4 - z3), (u1 + u2) * one, -u2 * one)
            sg = np.array([-1.0, 1.0, -1.0, 0.0])
        elif self.branch in ("generic", "reduced"):
            c2, c3, c4 = self.c
            e2, e3, e4 = (c3 - c2) / c4, -c3 / c4, 1.0 / c4
            g1 = e2 * z2 + e3 * z3 + e4 * z4
            g2 = z3 - z2
            row = (u3 + g2, -(u1 + u4 + e2 * u2 + g1), (u1 - e3 * u2) * one, -e4 * u2 * one)
            sg = np.array([-1.0, 1.0, 0.0, 0.0])
        else:
            return np.zeros(z.shape[:-2] + (4,) + z.shape[-1:]), np.zeros(4)
        return np.stack(row, axis=-2), sg

    def coupling(self, z: np.ndarray, k0: int = 0) -> CouplingField:
        """G(z) at every step; ``z`` is (K, 4, n) starting at step ``k0``."""
        z = np.asarray(z, float)
        if z.ndim == 2:
            z = z[None]
        u3bar = self.ustar[2] * np.ones(z.shape[-1])
        if self.ret is not None:
            u3bar = self.ret.g[k0 : k0 + z.shape[0]]
        row, sg = self._rrow(z, u3bar)
        G = sg[None, :, None, None] * row[:, None, :, :]
        return CouplingField(G)

    def coupling_at_zero(self, K: int = 1, n: int = 1, k0: int = 0) -> CouplingField:
        if self.ret is None:
            return CouplingField(self.coupling(np.zeros((1, 4, 1))).values)
        return self.coupling(np.zeros((K, 4, n)), k0)

    def key_entry(self) -> tuple[int, int] | None:
        """(row, col), 0-based, of the coupling entry carrying the control to the last row."""
        u1, u2, u3, u4 = self.ustar
        if self.branch == "identity":
            if self.ret is not None or u3 != 0:
                return (3, 0)
            return (3, 2) if u1 != 0 else ((3, 1) if u4 != 0 else None)
        if self.branch == "u3+u4":
            return (2, 0) if u3 != 0 else ((2, 1) if u4 != 0 else None)
        if self.branch in ("generic", "reduced"):
            return (1, 0) if u3 != 0 else None
        return None


def j1_combination(d) -> tuple[np.ndarray, str]:
    """Coefficients (c2, c3, c4) of the fourth j=1 variable and the branch name."""
    d2, d3, d4 = as_diffusion(d)[1:]
    if not (_same(d2, d3) or _same(d3, d4) or _same(d2, d4)):
        a, b = 1.0 / (d2 - d4), 1.0 / (d3 - d4)
        return np.array([a, b, b - a]), "generic"
    if _same(d3, d4):
        return np.array([0.0, 1.0, 1.0]), "reduced"
    return np.array([1.0, 0.0, -1.0]), "reduced"


def build_transformed_system(j: int, d, ustar, branch: str = "auto",
                             ret: ReturnTrajectory | None = None) -> TransformedSystem:
    """Bundle D_j, the change of variables and the coupling builder.

    For j = 1 ``branch`` may force ``generic`` (all of d2, d3, d4 distinct)
    or ``reduced`` (some repeated pair); ``auto`` picks from ``d``.
    """
    d = as_diffusion(d)
    us = _require_stationary(ustar)
    P = np.eye(4)
    D = np.diag(d)
    if ret is not None and j != 3:
        raise ValueError("the return method applies to j = 3 only")
    if branch == "decoupled":
        return TransformedSystem(j, d, us, D, P, "decoupled", ())
    if j == 3:
        return TransformedSystem(3, d, us, D, P, "identity", (), ret=ret)
    if j == 2:
        P[3, 2] = 1.0
        D[3, 2] = d[2] - d[3]
        return TransformedSystem(2, d, us, D, P, "u3+u4", (3,))
    if j != 1:
        raise ValueError(f"j must be 1, 2 or 3, got {j}")
    c, auto = j1_combination(d)
    if branch == "generic" and auto != "generic":
        raise ValueError("j = 1 generic change of variables needs d2, d3, d4 pairwise distinct; "
                         "use the 'reduced' branch for repeated diffusions")
    if branch not in ("auto", "generic", "reduced"):
        raise ValueError(f"unknown j = 1 branch {branch!r}")
    if branch == "reduced" and auto == "generic":
        raise ValueError("the 'reduced' j = 1 branch needs a repeated diffusion pair among d2, d3, d4")
    c2, c3, c4 = c
    P[2, 1] = 1.0
    P[3, 1:] = c
    D[2, 1] = d[1] - d[2]
    D[3, 1] = c2 * (d[1] - d[3]) - c3 * (d[2] - d[3])
    D[3, 2] = c3 * (d[2] - d[3])
    abg = tuple(float(v) for v in c) if auto == "generic" else None
    return TransformedSystem(1, d, us, D, P, auto, (2, 3), c=c, alpha_beta_gamma=abg)


def build_return_trajectory(tg: TimeGrid, dom: Domain1D, d3: float, amplitude: float = 1.0,
                            window: tuple[float, float] | None = None) -> ReturnTrajectory:
    """g(t, x) = amplitude * b(t) * b(x) with (1 - s^2)^4 bumps on ``window`` x omega.

    ``window`` defaults to (0.1 T, 0.9 T).  The source is defined from the
    discrete step, h3bar^k = (g^{k+1} - g^k)/dt - d3 Lap g^{k+1}, so the
    heat step started from g = 0 reproduces g exactly.
    """
    if not amplitude > 0:
        raise ValueError("amplitude must be positive")
    t1, t2 = window if window is not None else (0.1 * tg.T, 0.9 * tg.T)
    t = tg.t
    ia, ib = dom.window_indices("omega")
    if ib - ia + 1 < 5:
        raise ValueError("omega holds fewer than 5 grid points")
    inside_t = (t > t1) & (t < t2)
    if inside_t.sum() < 5:
        raise ValueError("return-method time window holds fewer than 5 steps")
    st = np.where(inside_t, (2 * t - (t1 + t2)) / (t2 - t1), 1.0)
    bt = np.where(inside_t, (1.0 - st**2) ** 4, 0.0)
    xa, xb = ia * dom.dx, ib * dom.dx
    x = dom.x
    sx = np.clip((2 * x - (xa + xb)) / (xb - xa), -1.0, 1.0)
    bx = (1.0 - sx**2) ** 4
    bx[: ia + 1] = 0.0
    bx[ib:] = 0.0
    g = amplitude * np.outer(bt, bx)
    h = (g[1:] - g[:-1]) / tg.dt - d3 * neumann_laplacian(g[1:], dom.dx)
    h *= window_mask(dom, "omega")
    return ReturnTrajectory(g, h, (t1, t2))


# ---------------------------------------------------------------------------
# conserved quantities, large-time limit, Kalman test

def scalar_heat(v0: np.ndarray, dk: float, tg: TimeGrid, dom: Domain1D,
                source: np.ndarray | None = None) -> np.ndarray:
    """Backward-Euler heat march of a single field; returns (m+1, n)."""
    z0 = np.zeros((4, dom.n))
    z0[0] = v0
    src = np.zeros((0, 4, dom.n))
    if source is not None:
        src = np.zeros((tg.m, 4, dom.n))
        src[:, 0] = source
    D = np.diag([dk, 1.0, 1.0, 1.0])
    states, bad = _kernels.linear_forward(z0, D, np.zeros((1, 4, 4, 1)), src,
                                          tg.dt, dom.dx, tg.m, GUARD)
    return states[:, 0]


@dataclass
class InvariantReport:
    """Per-combination time series of integrals and their drifts.

    ``series[name]`` holds the quadrature of the combination at every step;
    ``drift[name]`` is the max relative deviation from the start after the
    control input has been subtracted; ``raw_drift`` omits that correction.
    ``pointwise[name]`` is the max deviation of an equal-diffusion
    combination from an independently marched heat equation.
    """

    series: dict[str, np.ndarray]
    drift: dict[str, float]
    raw_drift: dict[str, float]
    pointwise: dict[str, float]


_COMBOS = {"u1+u2": (1, 1, 0, 0), "u1+u4": (1, 0, 0, 1),
           "u2+u3": (0, 1, 1, 0), "u3+u4": (0, 0, 1, 1)}


def invariant_report(traj: Trajectory, j: int, d) -> InvariantReport:
    d = as_diffusion(d)
    dom, tg = traj.dom, traj.timegrid
    mask = window_mask(dom, "omega")
    series, drift, raw, point = {}, {}, {}, {}
    jj = traj.controls.shape[1]
    for name, cv in _COMBOS.items():
        cv = np.array(cv, float)
        q = quadrature(np.einsum("i,kin->kn", cv, traj.states), dom)
        inflow = np.zeros(tg.m + 1)
        if jj:
            hin = np.einsum("i,kin->kn", cv[:jj], traj.controls) * mask
            inflow[1:] = np.cumsum(tg.dt * quadrature(hin, dom))
        scale = max(abs(q[0]), float(np.max(np.abs(q))), 1e-300)
        series[name] = q
        raw[name] = float(np.max(np.abs(q - q[0])) / scale)
        drift[name] = float(np.max(np.abs(q - q[0] - inflow)) / scale)
    for (k, l), sgn in _PAIRS.items():
        if not _same(d[k - 1], d[l - 1]):
            continue
        word = "plus" if sgn > 0 else "minus"
        combo = traj.states[:, k - 1] + sgn * traj.states[:, l - 1]
        src = None
        if jj >= k:
            src = (traj.controls[:, k - 1] + (sgn * traj.controls[:, l - 1] if jj >= l else 0.0)) * mask
        ref = scalar_heat(combo[0], d[k - 1], tg, dom, src)
        point[f"u{k}_{word}_u{l}"] = float(np.max(np.abs(combo - ref)))
    return InvariantReport(series, drift, raw, point)


def asymptotic_state(u0, dom: Domain1D) -> np.ndarray:
    """Constant stationary state sharing the four conserved pair masses of u0."""
    u0 = np.broadcast_to(np.asarray(u0, dtype=float).reshape(4, -1), (4, dom.n))
    m = mean(u0, dom)
    a, b, c, e = m[0] + m[1], m[0] + m[3], m[1] + m[2], m[2] + m[3]
    if min(a, b, c, e) <= 0:
        raise ValueError("positivity hypothesis fails: every pair mean "
                         "(u1+u2, u1+u4, u2+u3, u3+u4) must be positive")
    S = a + e
    z1 = a * b / S
    z2, z4 = a - z1, b - z1
    z3 = e - z4
    z = np.array([z1, z2, z3, z4])
    res = max(abs(z1 * z3 - z2 * z4), abs(z1 + z2 - a), abs(z1 + z4 - b),
              abs(z2 + z3 - c), abs(z3 + z4 - e))
    if res > 1e-12 * max(1.0, S * S):
        raise ArithmeticError(f"asymptotic state residual {res:.3e}")
    return z


def linearized_coupling(ustar) -> np.ndarray:
    """Coupling of the linearization at a constant stationary state."""
    u1, u2, u3, u4 = as_ustar(ustar)
    return np.outer(SIGNS, [u3, -u4, u1, -u2])


@dataclass
class KalmanResult:
    ranks: np.ndarray
    eigenvalues: np.ndarray
    controllable: bool


def kalman_rank(d, ustar, j: int, k_max: int = 64, L: float = 1.0,
                B: np.ndarray | None = None, rtol: float = 1e-10) -> KalmanResult:
    """Rank of [B, MB, M^2 B, M^3 B] with M = -lambda_k diag(d) + A per Neumann mode.

    M is scaled to unit norm and the Krylov columns are normalized before
    the SVD; neither changes the rank, both keep the columns comparable.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    d = as_diffusion(d)
    A = linearized_coupling(ustar)
    B = np.eye(4)[:, :j] if B is None else np.asarray(B, float)
    lam = (np.arange(k_max + 1) * np.pi / L) ** 2
    ranks = np.empty(k_max + 1, dtype=int)
    for k, lk in enumerate(lam):
        M = -lk * np.diag(d) + A
        nm = np.linalg.norm(M, 2)
        if nm > 0:
            M = M / nm
        blocks = [B]
        for _ in range(3):
            blocks.append(M @ blocks[-1])
        K = np.hstack(blocks)
        norms = np.linalg.norm(K, axis=0)
        K = K[:, norms > 0] / norms[norms > 0]
        sv = np.linalg.svd(K, compute_uv=False)
        ranks[k] = int(np.sum(sv > rtol * sv[0])) if sv.size else 0
    return KalmanResult(ranks, lam, bool(np.all(ranks == 4)))
