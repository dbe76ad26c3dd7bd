"""Compiled time-stepping sweeps.

Every implicit solve is with the Neumann block ``I - c*dx^2*Lap``, which is
tridiagonal with the two boundary off-diagonals doubled.  The Thomas
elimination is factored once per sweep and reused at every step, and the
solve works on the increment over the right-hand side.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _factor(c, n, cp, den):
    den[0] = 1.0 + 2.0 * c
    cp[0] = -2.0 * c / den[0]
    for i in range(1, n):
        a = -2.0 * c if i == n - 1 else -c
        den[i] = 1.0 + 2.0 * c - a * cp[i - 1]
        cp[i] = -c / den[i] if i < n - 1 else 0.0


@njit(cache=True)
def _solve(c, cp, den, rhs, out):
    # increment form: out = rhs + delta with (I - c dx^2 Lap) delta = c dx^2 Lap rhs,
    # so constants pass through bit-for-bit
    n = rhs.shape[0]
    out[0] = 2.0 * c * (rhs[1] - rhs[0]) / den[0]
    for i in range(1, n):
        a = -2.0 * c if i == n - 1 else -c
        if i == n - 1:
            g = 2.0 * c * (rhs[n - 2] - rhs[n - 1])
        else:
            g = c * (rhs[i - 1] - 2.0 * rhs[i] + rhs[i + 1])
        out[i] = (g - a * out[i - 1]) / den[i]
    for i in range(n - 2, -1, -1):
        out[i] -= cp[i] * out[i + 1]
    for i in range(n):
        out[i] += rhs[i]


@njit(cache=True)
def _add_lap(u, coef, inv_dx2, rhs):
    n = u.shape[0]
    f = coef * inv_dx2
    rhs[0] += f * 2.0 * (u[1] - u[0])
    for x in range(1, n - 1):
        rhs[x] += f * (u[x - 1] - 2.0 * u[x] + u[x + 1])
    rhs[n - 1] += f * 2.0 * (u[n - 2] - u[n - 1])


@njit(cache=True)
def _too_big(u, guard):
    for v in u.ravel():
        if not abs(v) <= guard:
            return True
    return False


@njit(cache=True)
def linear_forward(z0, Dm, A, src, dt, dx, steps, guard):
    n = z0.shape[1]
    inv = 1.0 / (dx * dx)
    states = np.empty((steps + 1, 4, n))
    states[0] = z0
    cs = np.empty(4)
    cps = np.empty((4, n))
    dens = np.empty((4, n))
    for i in range(4):
        cs[i] = dt * Dm[i, i] * inv
        _factor(cs[i], n, cps[i], dens[i])
    rhs = np.empty(n)
    vt = A.shape[0] > 1
    vx = A.shape[3] > 1
    has_src = src.shape[0] > 0
    for k in range(steps):
        ka = k if vt else 0
        zk = states[k]
        zn = states[k + 1]
        for i in range(4):
            for x in range(n):
                xa = x if vx else 0
                acc = 0.0
                for l in range(4):
                    acc += A[ka, i, l, xa] * zk[l, x]
                r = zk[i, x] + dt * acc
                if has_src:
                    r += dt * src[k, i, x]
                rhs[x] = r
            for l in range(i):
                if Dm[i, l] != 0.0:
                    _add_lap(zn[l], dt * Dm[i, l], inv, rhs)
            _solve(cs[i], cps[i], dens[i], rhs, zn[i])
        if _too_big(zn, guard):
            return states, k + 1
    return states, -1


@njit(cache=True)
def linear_adjoint(psiT, Dm, A, dt, dx, steps):
    n = psiT.shape[1]
    inv = 1.0 / (dx * dx)
    psi = np.empty((steps + 1, 4, n))
    chi = np.empty((steps, 4, n))
    psi[steps] = psiT
    cs = np.empty(4)
    cps = np.empty((4, n))
    dens = np.empty((4, n))
    for i in range(4):
        cs[i] = dt * Dm[i, i] * inv
        _factor(cs[i], n, cps[i], dens[i])
    rhs = np.empty(n)
    vt = A.shape[0] > 1
    vx = A.shape[3] > 1
    for k in range(steps - 1, -1, -1):
        ka = k if vt else 0
        ck = chi[k]
        for i in range(3, -1, -1):
            for x in range(n):
                rhs[x] = psi[k + 1, i, x]
            for l in range(i + 1, 4):
                if Dm[l, i] != 0.0:
                    _add_lap(ck[l], dt * Dm[l, i], inv, rhs)
            _solve(cs[i], cps[i], dens[i], rhs, ck[i])
        for i in range(4):
            for x in range(n):
                xa = x if vx else 0
                acc = 0.0
                for l in range(4):
                    acc += A[ka, l, i, xa] * ck[l, x]
                psi[k, i, x] = ck[i, x] + dt * acc
    return psi, chi


@njit(cache=True)
def nonlinear_forward(u0, d, src, dt, dx, steps, guard):
    n = u0.shape[1]
    inv = 1.0 / (dx * dx)
    states = np.empty((steps + 1, 4, n))
    states[0] = u0
    cs = np.empty(4)
    cps = np.empty((4, n))
    dens = np.empty((4, n))
    for i in range(4):
        cs[i] = dt * d[i] * inv
        _factor(cs[i], n, cps[i], dens[i])
    rhs = np.empty(n)
    r = np.empty(n)
    has_src = src.shape[0] > 0
    for k in range(steps):
        uk = states[k]
        un = states[k + 1]
        for x in range(n):
            r[x] = uk[0, x] * uk[2, x] - uk[1, x] * uk[3, x]
        for i in range(4):
            sgn = -1.0 if i % 2 == 0 else 1.0
            for x in range(n):
                v = uk[i, x] + dt * sgn * r[x]
                if has_src:
                    v += dt * src[k, i, x]
                rhs[x] = v
            _solve(cs[i], cps[i], dens[i], rhs, un[i])
        if _too_big(un, guard):
            return states, k + 1
    return states, -1
