"""Carleman weight functions for the penalized HUM functional.

With eta0 a profile vanishing on the boundary and maximal at the centre of
omega_inner, and tau = t - t0 the time inside a window of length T,

    phi(t, x)   = exp(lam eta0(x)) / (tau (T - tau))
    alpha(t, x) = (exp(lam eta0(x)) - exp(2 lam |eta0|_inf)) / (tau (T - tau))

and the HUM multiplier is rho = exp(2 s alpha) (s phi)^M_j.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Domain1D, window_mask

M_EXPONENTS = {3: 7, 2: 13, 1: 166}
LOG_FLOOR = -700.0


@dataclass(frozen=True)
class Eta0:
    """eta0(x) = x^p (L - x)^q / norm, critical point at ``center``."""

    L: float
    p: float
    q: float
    norm: float
    center: float

    def __call__(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.L)
        return x**self.p * (self.L - x) ** self.q / self.norm

    def derivative(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.L)
        p, q, L = self.p, self.q, self.L
        return x ** (p - 1) * (L - x) ** (q - 1) * (p * L - (p + q) * x) / self.norm


def build_eta0(dom: Domain1D, p: float = 2.0) -> Eta0:
    a, b = dom.window_bounds("omega_inner")
    c = 0.5 * (a + b)
    L = dom.L
    if not 0 < c < L:
        raise ValueError("centre of omega_inner must lie strictly inside (0, L)")
    q = p * (L - c) / c
    norm = c**p * (L - c) ** q
    return Eta0(L, p, q, norm, c)


@dataclass(frozen=True)
class CarlemanWeights:
    eta0: Eta0
    lam: float
    s: float
    M: int
    T: float
    t0: float = 0.0

    def _tau(self, t):
        tau = np.asarray(t, dtype=float) - self.t0
        if np.any(tau <= 0) or np.any(tau >= self.T):
            raise ValueError("weights are defined only for t0 < t < t0 + T")
        return tau * (self.T - tau)

    def phi(self, t, x) -> np.ndarray:
        return np.exp(self.lam * self.eta0(x)) / self._tau(t)

    def alpha(self, t, x) -> np.ndarray:
        top = np.exp(self.lam * self.eta0(x)) - np.exp(2.0 * self.lam)
        return top / self._tau(t)

    def phi_hat(self, t) -> np.ndarray:
        return 1.0 / self._tau(t)

    def alpha_hat(self, t) -> np.ndarray:
        return (1.0 - np.exp(2.0 * self.lam)) / self._tau(t)

    def log_multiplier(self, t, x) -> np.ndarray:
        t = np.asarray(t, dtype=float)[..., None]
        return 2.0 * self.s * self.alpha(t, x) + self.M * np.log(self.s * self.phi(t, x))


S0 = {3: 0.025, 2: 0.025, 1: 0.1}


def default_s(T: float, j: int = 3) -> float:
    """s0_j (T + T^2), with s0 = 0.025 for j = 2, 3 and 0.1 for j = 1.

    Larger s0 pushes the raw multiplier below exp(-700) everywhere and
    squeezes the normalized one into a near-impulse at the window centre,
    which wrecks the conditioning of the HUM Gramian.  The j = 1 value is
    larger because the power 166 otherwise keeps rho far from zero at the
    ends of the window.
    """
    return S0[j] * (T + T * T)


def build_weights(dom: Domain1D, T: float, j: int, lam: float = 2.0, s: float | None = None,
                  t0: float = 0.0) -> CarlemanWeights:
    """Weights on the time window (t0, t0 + T); ``s`` defaults to :func:`default_s`."""
    if lam < 1:
        raise ValueError("lambda must be >= 1")
    s = default_s(T, j) if s is None else s
    if not s > 0:
        raise ValueError("s must be positive")
    return CarlemanWeights(build_eta0(dom), float(lam), float(s), M_EXPONENTS[j], float(T), float(t0))


def eval_weights(w: CarlemanWeights, t, x) -> tuple[np.ndarray, np.ndarray]:
    return w.phi(t, x), w.alpha(t, x)


def hum_multiplier(w: CarlemanWeights, t, x) -> np.ndarray:
    """rho(t, x) from its logarithm, exactly 0 where the log falls below -700."""
    lr = w.log_multiplier(t, x)
    return np.where(lr < LOG_FLOOR, 0.0, np.exp(np.maximum(lr, LOG_FLOOR)))


def multiplier_grid(w: CarlemanWeights, times: np.ndarray, dom: Domain1D,
                    normalize: bool = True) -> np.ndarray:
    """rho on (times x grid), zero outside the open time window and outside omega.

    With ``normalize`` the logarithm is shifted so the largest value is 1;
    the clamp at exp(-700) is applied after the shift.
    """
    times = np.asarray(times, dtype=float)
    tau = times - w.t0
    live = (tau > 0) & (tau < w.T)
    mask = window_mask(dom, "omega") > 0
    lr = np.full((times.size, dom.n), -np.inf)
    if np.any(live):
        lr[live] = w.log_multiplier(times[live], dom.x)
    lr[:, ~mask] = -np.inf
    if normalize and np.isfinite(lr).any():
        lr = lr - np.max(lr)
    return np.where(lr < LOG_FLOOR, 0.0, np.exp(np.maximum(lr, LOG_FLOOR)))
