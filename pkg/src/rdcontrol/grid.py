"""Uniform grid on (0, L) with a ghost-point Neumann Laplacian and trapezoid quadrature.

Grid functions are plain 1-D float arrays of length ``n``; four-component
states are ``(4, n)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WINDOWS = ("omega", "omega0", "omega_inner")


def _snap(a: float, dx: float) -> int:
    return int(np.floor(a / dx + 0.5))


@dataclass(frozen=True)
class Domain1D:
    """Interval (0, L) sampled at ``n`` points, with nested control windows.

    Window endpoints are snapped to the nearest grid point.  The snapped
    windows must satisfy omega_inner strictly inside omega0 strictly inside
    omega strictly inside (0, L), and each must hold at least 3 points.
    """

    L: float = 1.0
    n: int = 101
    omega: tuple[float, float] = (0.3, 0.7)
    omega0: tuple[float, float] = (0.35, 0.65)
    omega_inner: tuple[float, float] = (0.4, 0.6)
    _idx: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 3:
            raise ValueError(f"n must be >= 3, got {self.n}")
        if not self.L > 0:
            raise ValueError(f"L must be positive, got {self.L}")
        dx = self.dx
        idx = {}
        for name in WINDOWS:
            a, b = getattr(self, name)
            if not a < b:
                raise ValueError(f"{name}: empty interval ({a}, {b})")
            ia, ib = _snap(a, dx), _snap(b, dx)
            if ib - ia + 1 < 3:
                raise ValueError(f"{name} holds fewer than 3 grid points at n={self.n}")
            idx[name] = (ia, ib)
        outer = (0, self.n - 1)
        for name in WINDOWS:
            ia, ib = idx[name]
            if not (outer[0] < ia and ib < outer[1]):
                raise ValueError(f"{name} is not strictly inside its enclosing interval")
            outer = (ia, ib)
        object.__setattr__(self, "_idx", idx)

    @property
    def dx(self) -> float:
        return self.L / (self.n - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.n)

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.n, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    def window_indices(self, which: str) -> tuple[int, int]:
        """Inclusive grid index range of a snapped window."""
        if which not in self._idx:
            raise KeyError(f"unknown window {which!r}; expected one of {WINDOWS}")
        return self._idx[which]

    def window_bounds(self, which: str) -> tuple[float, float]:
        ia, ib = self.window_indices(which)
        return ia * self.dx, ib * self.dx


def neumann_laplacian(u: np.ndarray, dx: float) -> np.ndarray:
    """Mirror-ghost Neumann Laplacian along the last axis."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    inv = 1.0 / (dx * dx)
    out[..., 1:-1] = (u[..., :-2] - 2.0 * u[..., 1:-1] + u[..., 2:]) * inv
    out[..., 0] = 2.0 * (u[..., 1] - u[..., 0]) * inv
    out[..., -1] = 2.0 * (u[..., -2] - u[..., -1]) * inv
    return out


def laplacian_matrix(n: int, dx: float) -> np.ndarray:
    """Dense form of :func:`neumann_laplacian` (small grids, oracles)."""
    return neumann_laplacian(np.eye(n), dx).T


def quadrature(u: np.ndarray, dom: Domain1D) -> np.ndarray | float:
    """Trapezoid integral over (0, L) along the last axis."""
    return np.asarray(u, dtype=float) @ dom.weights


def mean(u: np.ndarray, dom: Domain1D) -> np.ndarray | float:
    return quadrature(u, dom) / dom.L


def window_mask(dom: Domain1D, which: str | tuple[float, float] = "omega") -> np.ndarray:
    """0/1 indicator of a window, closed at its snapped endpoints.

    ``which`` is a window name or an explicit ``(a, b)`` pair.
    """
    if isinstance(which, str):
        ia, ib = dom.window_indices(which)
    else:
        a, b = which
        ia, ib = max(_snap(a, dom.dx), 0), min(_snap(b, dom.dx), dom.n - 1)
    m = np.zeros(dom.n)
    m[ia : ib + 1] = 1.0
    return m


def inner(u: np.ndarray, v: np.ndarray, dom: Domain1D) -> float:
    """Quadrature-weighted inner product summed over any leading axes."""
    return float(np.sum(np.asarray(u) * np.asarray(v) * dom.weights))
