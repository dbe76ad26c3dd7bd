"""Acceptance criteria P1-P12, one test each.

Every test prints a single ``Pk PASS|FAIL`` line with the measured value,
the tolerance and the wall time.  The lines are repeated in the terminal
summary.  Timings start after a kernel warm-up so JIT compilation is not
charged to the first criterion.
"""
import time

import numpy as np
import pytest

import conftest
from conftest import bump
from oracles import dense_heat_hum
from rdcontrol import _kernels
from rdcontrol.control import gamma_path, global_control, local_control
from rdcontrol.grid import Domain1D, laplacian_matrix, mean
from rdcontrol.hum import ControlProblem, HumConfig, solve_penalized_hum, three_phase_control
from rdcontrol.simulate import CouplingField, TimeGrid, simulate_nonlinear
from rdcontrol.structure import build_transformed_system, is_stationary, kalman_rank

D = np.array([1.0, 2.0, 3.0, 4.0])
ONES = np.ones(4)


@pytest.fixture(scope="module", autouse=True)
def warm():
    dom = Domain1D(n=21)
    simulate_nonlinear(np.ones((4, 21)), TimeGrid(0.1, 2), D, dom)
    sys = build_transformed_system(3, D, ONES)
    _kernels.linear_adjoint(np.ones((4, 21)), sys.D, np.zeros((1, 4, 4, 1)), 0.1, dom.dx, 2)


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def report(tag, ok, detail, clock, budget):
    fast = clock.elapsed <= budget
    status = "PASS" if ok and fast else "FAIL"
    line = f"{tag} {status}  {detail}  time {clock.elapsed:.2f}s (budget {budget:g}s)"
    print(line)
    conftest.ACCEPTANCE.append(line)
    assert ok, line
    assert fast, line


def l2(v, dom):
    return float(np.sqrt(np.sum(v * v * dom.weights)))


def test_p1_mass_invariants():
    dom = Domain1D(n=101)
    u0 = np.random.default_rng(1).uniform(0.0, 2.0, (4, dom.n))
    with Clock() as c:
        tr = simulate_nonlinear(u0, TimeGrid(1.0, 400), D, dom)
        drifts = {}
        for name, (k, l) in {"u2+u3": (1, 2), "u3+u4": (2, 3)}.items():
            q = np.trapezoid(tr.states[:, k] + tr.states[:, l], dom.x, axis=-1)
            drifts[name] = float(np.max(np.abs(q - q[0])) / abs(q[0]))
    worst = max(drifts.values())
    report("P1", worst <= 1e-10, f"max relative drift {worst:.2e} <= 1e-10", c, 1)


def test_p2_equal_diffusion():
    dom = Domain1D(n=101)
    tg = TimeGrid(1.0, 400)
    d = np.array([1.0, 2.0, 3.0, 3.0])
    u0 = np.random.default_rng(2).uniform(0.0, 2.0, (4, dom.n))
    with Clock() as c:
        tr = simulate_nonlinear(u0, tg, d, dom)
        M = np.eye(dom.n) - tg.dt * 3.0 * laplacian_matrix(dom.n, dom.dx)
        v = u0[2] + u0[3]
        err = 0.0
        for k in range(tg.m):
            v = np.linalg.solve(M, v)
            err = max(err, float(np.max(np.abs(tr.states[k + 1, 2] + tr.states[k + 1, 3] - v))))
    report("P2", err <= 1e-12, f"max |u3+u4 - heat| {err:.2e} <= 1e-12", c, 1)


def test_p3_dense_oracle():
    dom = Domain1D(n=15)
    tg = TimeGrid(1.0, 12)
    sys = build_transformed_system(3, D, ONES)
    z0 = np.zeros((4, dom.n))
    z0[0] = 1 + np.cos(np.pi * dom.x) + 0.5 * np.cos(2 * np.pi * dom.x)
    with Clock() as c:
        p = ControlProblem(sys, CouplingField.zero(), tg, dom, z0, check_duality=True)
        r = solve_penalized_hum(p)
        ref = dense_heat_hum(z0[0], 1.0, p.rho(), tg.dt, dom, p.epsilon)
        err = float(np.linalg.norm(r.controls[:, 0] - ref) / np.linalg.norm(ref))
        dual = max(r.duality_history)
    ok = err <= 1e-8 and dual <= 1e-10 and np.all(r.controls[:, 1:] == 0)
    report("P3", ok, f"rel. error vs dense {err:.2e} <= 1e-8, max duality {dual:.2e} <= 1e-10", c, 5)


def _p4_setup():
    dom = Domain1D(n=61)
    tg = TimeGrid(1.0, 200)
    b = bump(dom.x)
    u0 = ONES[:, None] + 1e-2 * np.array([b, -b, 0.5 * b, b])
    return dom, tg, u0


def test_p4_local_control():
    dom, tg, u0 = _p4_setup()
    with Clock() as c:
        traj, rep = local_control(u0, ONES, 3, D, dom, tg, hum=HumConfig(epsilon=1e-6))
        err = float(np.max(np.abs(simulate_nonlinear(u0, tg, D, dom, traj.controls).final - 1.0)))
    ok = rep.converged and rep.iterations <= 15 and err <= 1e-3
    report("P4", ok, f"{rep.iterations} outer iterations <= 15, |u(T) - u*|_inf {err:.2e} <= 1e-3",
           c, 120)


def test_p5_epsilon_sweep():
    dom, tg, u0 = _p4_setup()
    sys = build_transformed_system(3, D, ONES)
    z0 = sys.forward_map(u0 - ONES[:, None])
    with Clock() as c:
        norms, bounds = [], []
        for eps in (1e-2, 1e-4, 1e-6):
            p = HumConfig(epsilon=eps).problem(sys, sys.coupling_at_zero(), tg, dom, z0)
            h = three_phase_control(z0, p).hum
            norms.append(h.terminal_norm)
            bounds.append(h.terminal_norm**2 / eps + h.weighted_control_norm2)
    decreasing = norms[0] > norms[1] > norms[2]
    ratio = max(bounds) / min(bounds)
    detail = (f"terminal norms {', '.join(f'{v:.2e}' for v in norms)} decreasing={decreasing}, "
              f"bound ratio {ratio:.2f} <= 3")
    report("P5", decreasing and ratio <= 3, detail, c, 180)


def test_p6_transforms():
    rng = np.random.default_rng(6)
    with Clock() as c:
        worst = 0.0
        for j in (1, 2, 3):
            sys = build_transformed_system(j, D, ONES)
            u = rng.uniform(-5, 5, (1000, 4, 1))
            worst = max(worst, float(np.max(np.abs(sys.inverse_map(sys.forward_map(u)) - u))))
            eig = np.sort(np.linalg.eigvals(sys.D).real)
            eig_err = float(np.max(np.abs(eig - D)))
            worst_eig = eig_err if j == 1 else max(worst_eig, eig_err)
        abg = build_transformed_system(1, D, ONES).alpha_beta_gamma
    ok = worst <= 1e-13 and abg == (-0.5, -1.0, -0.5) and worst_eig <= 1e-10
    report("P6", ok, f"round trip {worst:.2e} <= 1e-13, (a,b,g) = {abg}, eig error {worst_eig:.1e}",
           c, 1)


def test_p7_asymptotics():
    dom = Domain1D(n=61)
    u0 = np.repeat(np.array([1.0, 0.0, 1.0, 0.0])[:, None], dom.n, 1)
    with Clock() as c:
        tr = simulate_nonlinear(u0, TimeGrid(40.0, 4000), D, dom)
        err = float(np.max(np.abs(tr.final - 0.5)))
    report("P7", err <= 1e-4, f"|u(40) - 1/2|_inf {err:.2e} <= 1e-4", c, 10)


def _random_stationary(rng, k):
    a, b, e = rng.uniform(0.2, 3.0, 3)
    patterns = [
        np.array([b * e / a, b, a, e]),
        np.array([0.0, b, 0.0, 0.0]),
        np.array([a, 0.0, 0.0, e]),
        np.array([a, b, 0.0, 0.0]),
        np.array([0.0, 0.0, a, e]),
        np.array([0.0, b, a, 0.0]),
    ]
    return patterns[k % len(patterns)]


def test_p8_kalman():
    rng = np.random.default_rng(8)
    with Clock() as c:
        bad = []
        for k in range(20):
            d = rng.uniform(0.5, 5.0, 4)
            us = _random_stationary(rng, k)
            assert is_stationary(us)
            expect = bool(np.any(us[[0, 2, 3]] != 0))
            if kalman_rank(d, us, 3, k_max=64).controllable != expect:
                bad.append(("j3", tuple(d), tuple(us)))
            d2 = d.copy()
            if abs(d2[2] - d2[3]) < 1e-3:
                d2[3] += 0.5
            if not kalman_rank(d2, us, 2, k_max=64).ranks[0] < 4:
                bad.append(("j2", tuple(d2), tuple(us)))
    report("P8", not bad, f"{40 - len(bad)}/40 rank statements hold", c, 1)


def test_p9_hj_conservation():
    dom, tg, _ = _p4_setup()
    x = dom.x
    with Clock() as c:
        worst = 0.0
        for j, idx in ((2, [3]), (1, [2, 3])):
            sys = build_transformed_system(j, D, ONES)
            z0 = 1e-2 * np.array([bump(x), np.cos(np.pi * x), np.cos(2 * np.pi * x),
                                  np.cos(3 * np.pi * x)])
            res = three_phase_control(z0, HumConfig().problem(sys, sys.coupling_at_zero(), tg,
                                                              dom, z0))
            m = mean(res.trajectory.states[:, idx], dom)
            assert np.any(res.trajectory.controls != 0)
            worst = max(worst, float(np.max(np.abs(m - m[0]))))
    report("P9", worst <= 1e-10, f"max mean drift {worst:.2e} <= 1e-10", c, 5)


def test_p10_return_method():
    dom, tg, _ = _p4_setup()
    b = bump(dom.x)
    us = np.array([0.0, 1.0, 0.0, 0.0])
    u0 = us[:, None] + 1e-2 * np.array([b, -b, b, 1 + b])
    with Clock() as c:
        plain = build_transformed_system(3, D, us)
        z0 = u0 - us[:, None]
        res = three_phase_control(z0, HumConfig().problem(plain, plain.coupling_at_zero(), tg,
                                                          dom, z0))
        ratio = l2(res.trajectory.states[-1, 3], dom) / l2(z0[3], dom)
        floor = 0.5 * np.exp(-tg.T)
        traj, rep = local_control(u0, us, 3, D, dom, tg)
        err = float(np.max(np.abs(simulate_nonlinear(u0, tg, D, dom, traj.controls).final
                                  - us[:, None])))
    ok = ratio >= floor and rep.return_method and rep.converged and err <= 1e-3
    report("P10", ok, f"without: |z4(T)|/|z4(0)| {ratio:.3f} >= {floor:.3f}; "
                      f"with: |u(T) - u*|_inf {err:.2e} <= 1e-3", c, 180)


def test_p11_staircase():
    dom = Domain1D(n=61)
    u0 = np.repeat(np.array([2.0, 1.0, 2.0, 1.0])[:, None], dom.n, 1)
    with Clock() as c:
        traj, log = global_control(u0, ONES, 3, D, dom)
        err = float(np.max(np.abs(traj.final - 1.0)))
        th = log.thetas
        anchors = [gamma_path(log.z, ONES, t) for t in th]
        stat = max(abs(v[0] * v[2] - v[1] * v[3]) for v in anchors)
    ok = err <= 1e-3 and th[-1] == 1.0 and all(a < b for a, b in zip(th, th[1:])) and stat <= 1e-12
    report("P11", ok, f"|u(T) - u*|_inf {err:.2e} <= 1e-3, theta log {[round(t, 4) for t in th]}, "
                      f"max |v1v3 - v2v4| {stat:.1e} <= 1e-12", c, 600)


def test_p12_constancy():
    dom = Domain1D(n=61)
    rng = np.random.default_rng(12)
    with Clock() as c:
        worst = 0.0
        for _ in range(10):
            u0 = rng.uniform(0.0, 2.0, (4, dom.n))
            tr = simulate_nonlinear(u0, TimeGrid(20.0, 2000), D, dom)
            osc = tr.final.max(axis=1) - tr.final.min(axis=1)
            worst = max(worst, float(osc.max()))
    report("P12", worst <= 1e-6, f"max spatial oscillation {worst:.2e} <= 1e-6", c, 60)
