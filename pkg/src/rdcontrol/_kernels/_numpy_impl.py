"""Pure-numpy sweeps with the same signatures as the compiled ones.

Implicit blocks are applied through cached dense inverses, which keeps every
step vectorized over the grid.  Intended for moderate n (a few hundred).
"""
from functools import lru_cache

import numpy as np


def _lap(u, inv_dx2):
    out = np.empty_like(u)
    out[1:-1] = (u[:-2] - 2.0 * u[1:-1] + u[2:]) * inv_dx2
    out[0] = 2.0 * (u[1] - u[0]) * inv_dx2
    out[-1] = 2.0 * (u[-2] - u[-1]) * inv_dx2
    return out


@lru_cache(maxsize=64)
def _block_inverse(c, n):
    M = np.zeros((n, n))
    i = np.arange(n)
    M[i, i] = 1.0 + 2.0 * c
    M[i[1:], i[:-1]] = -c
    M[i[:-1], i[1:]] = -c
    M[0, 1] = -2.0 * c
    M[n - 1, n - 2] = -2.0 * c
    return np.linalg.inv(M)


class _Block:
    """(I - c dx^2 Lap)^{-1} applied in increment form, exact on constants."""

    def __init__(self, c, n):
        self.M = _block_inverse(c, n)
        self.c = c

    def __matmul__(self, rhs):
        return rhs + self.M @ (self.c * _lap(rhs, 1.0))


def _inverses(diag, dt, dx, n):
    inv = 1.0 / (dx * dx)
    return [_Block(float(dt * diag[i] * inv), n) for i in range(4)]


def _apply(A, ka, z):
    return np.einsum("ilx,lx->ix", A[ka], z) if A.shape[3] > 1 else A[ka, :, :, 0] @ z


def _apply_t(A, ka, z):
    return np.einsum("lix,lx->ix", A[ka], z) if A.shape[3] > 1 else A[ka, :, :, 0].T @ z


def linear_forward(z0, Dm, A, src, dt, dx, steps, guard):
    n = z0.shape[1]
    inv = 1.0 / (dx * dx)
    Minv = _inverses(np.diag(Dm), dt, dx, n)
    states = np.empty((steps + 1, 4, n))
    states[0] = z0
    has_src = src.shape[0] > 0
    for k in range(steps):
        ka = k if A.shape[0] > 1 else 0
        zk = states[k]
        rhs_all = zk + dt * _apply(A, ka, zk)
        if has_src:
            rhs_all = rhs_all + dt * src[k]
        zn = states[k + 1]
        for i in range(4):
            rhs = rhs_all[i]
            for l in range(i):
                if Dm[i, l] != 0.0:
                    rhs = rhs + dt * Dm[i, l] * _lap(zn[l], inv)
            zn[i] = Minv[i] @ rhs
        if not np.all(np.abs(zn) <= guard):
            return states, k + 1
    return states, -1


def linear_adjoint(psiT, Dm, A, dt, dx, steps):
    n = psiT.shape[1]
    inv = 1.0 / (dx * dx)
    Minv = _inverses(np.diag(Dm), dt, dx, n)
    psi = np.empty((steps + 1, 4, n))
    chi = np.empty((steps, 4, n))
    psi[steps] = psiT
    for k in range(steps - 1, -1, -1):
        ka = k if A.shape[0] > 1 else 0
        ck = chi[k]
        for i in range(3, -1, -1):
            rhs = psi[k + 1, i]
            for l in range(i + 1, 4):
                if Dm[l, i] != 0.0:
                    rhs = rhs + dt * Dm[l, i] * _lap(ck[l], inv)
            ck[i] = Minv[i] @ rhs
        psi[k] = ck + dt * _apply_t(A, ka, ck)
    return psi, chi


def nonlinear_forward(u0, d, src, dt, dx, steps, guard):
    n = u0.shape[1]
    Minv = _inverses(d, dt, dx, n)
    sgn = np.array([-1.0, 1.0, -1.0, 1.0])[:, None]
    states = np.empty((steps + 1, 4, n))
    states[0] = u0
    has_src = src.shape[0] > 0
    for k in range(steps):
        uk = states[k]
        r = uk[0] * uk[2] - uk[1] * uk[3]
        rhs = uk + dt * sgn * r
        if has_src:
            rhs = rhs + dt * src[k]
        for i in range(4):
            states[k + 1, i] = Minv[i] @ rhs[i]
        if not np.all(np.abs(states[k + 1]) <= guard):
            return states, k + 1
    return states, -1
