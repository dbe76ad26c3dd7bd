import numpy as np
import pytest

from conftest import bump
from oracles import dense_heat_hum
from rdcontrol.grid import Domain1D, mean, window_mask
from rdcontrol.hum import (ControlProblem, HjMembershipError, HumConfig, observability_probe,
                           solve_penalized_hum, three_phase_control)
from rdcontrol.simulate import CouplingField, TimeGrid
from rdcontrol.structure import build_transformed_system

D = (1, 2, 3, 4)
ONES = (1, 1, 1, 1)


def _z0(dom, j, amp=1e-2):
    x = dom.x
    z = np.zeros((4, dom.n))
    z[0] = amp * bump(x)
    z[1] = amp * np.cos(np.pi * x)
    z[2] = amp * (np.cos(2 * np.pi * x) if j == 1 else bump(x, 0.6))
    z[3] = amp * (np.cos(3 * np.pi * x) if j < 3 else bump(x, 0.7))
    return z


def _heat_problem(**kw):
    dom = Domain1D(n=15)
    tg = TimeGrid(1.0, 12)
    sys = build_transformed_system(3, D, ONES)
    z0 = np.zeros((4, dom.n))
    z0[0] = 1 + np.cos(np.pi * dom.x)
    return ControlProblem(sys, CouplingField.zero(), tg, dom, z0, **kw)


def test_zero_initial_state():
    p = _heat_problem()
    p.z0[:] = 0
    r = solve_penalized_hum(p)
    assert r.cg_iterations == 0 and r.terminal_norm == 0 and np.all(r.controls == 0)


@pytest.mark.parametrize("eps", [1e-2, 1e-6])
def test_dense_oracle(eps):
    p = _heat_problem(epsilon=eps, cg_tol=1e-12, check_duality=True)
    r = solve_penalized_hum(p)
    rho = p.rho()
    ref = dense_heat_hum(p.z0[0], 1.0, rho, p.timegrid.dt, p.dom, eps)
    err = np.linalg.norm(r.controls[:, 0] - ref) / np.linalg.norm(ref)
    assert err <= 1e-8
    assert np.all(r.controls[:, 1:] == 0)
    assert r.duality_history and max(r.duality_history) <= 1e-10


def _p4_problem(j, eps=1e-6, **kw):
    dom = Domain1D(n=61)
    tg = TimeGrid(1.0, 200)
    sys = build_transformed_system(j, D, ONES)
    return ControlProblem(sys, sys.coupling_at_zero(), tg, dom, _z0(dom, j), epsilon=eps, **kw)


@pytest.mark.parametrize("j", [1, 2, 3])
def test_hum_properties(j):
    p = _p4_problem(j, check_duality=True)
    r = solve_penalized_hum(p)
    assert r.converged and not r.stagnated
    assert r.optimality_residual <= 10 * p.cg_tol
    assert r.J <= r.J0
    assert max(r.duality_history) <= 1e-10
    t = p.timegrid.t[:-1]
    outside_t = (t <= p.window[0]) | (t >= p.window[1])
    outside_x = window_mask(p.dom) == 0
    assert np.all(r.controls[outside_t] == 0) and np.all(r.controls[:, :, outside_x] == 0)
    assert r.controls.shape == (p.timegrid.m, j, p.dom.n)


@pytest.mark.parametrize("j,idx", [(2, [3]), (1, [2, 3])])
def test_conserved_means(j, idx):
    p = _p4_problem(j)
    res = three_phase_control(p.z0, p)
    means = mean(res.trajectory.states[:, idx], p.dom)
    assert np.max(np.abs(means - means[0])) <= 1e-10
    assert res.hum.terminal_norm < 1e-2 * np.sqrt(np.sum(p.z0**2 * p.dom.weights))


@pytest.mark.parametrize("j,comp", [(2, 3), (1, 2), (1, 3)])
def test_membership_error(j, comp):
    p = _p4_problem(j)
    p.z0[comp] += 1e-3
    with pytest.raises(HjMembershipError):
        solve_penalized_hum(p)


def test_terminal_norm_decreases_in_eps():
    norms = [solve_penalized_hum(_p4_problem(3, eps)).terminal_norm for eps in (1e-2, 1e-4, 1e-6)]
    assert norms[0] > norms[1] > norms[2]


def test_three_phase_bookkeeping():
    p = _p4_problem(3)
    res = three_phase_control(p.z0, p)
    assert abs(res.norm_at_t2 - res.hum.terminal_norm) <= 1e-12
    c = res.trajectory.controls
    assert np.all(c[: res.k1] == 0) and np.all(c[res.k2:] == 0)
    np.testing.assert_array_equal(res.trajectory.states[0], p.z0)
    zero = three_phase_control(np.zeros((4, p.dom.n)), p)
    assert np.all(zero.trajectory.states == 0) and np.all(zero.trajectory.controls == 0)


def test_humconfig_window():
    cfg = HumConfig(window=(0.25, 0.75))
    dom = Domain1D(n=21)
    sys = build_transformed_system(3, D, ONES)
    p = cfg.problem(sys, sys.coupling_at_zero(), TimeGrid(2.0, 40), dom, np.zeros((4, 21)))
    assert p.window == (0.5, 1.5)
    with pytest.raises(ValueError):
        HumConfig(window=(0.5, 0.4))
    with pytest.raises(ValueError):
        HumConfig(epsilon=0)


def test_observability_examples():
    p = _p4_problem(3)
    zero = observability_probe(p, terminal_data=[np.zeros((4, p.dom.n))])
    assert zero.skipped == 1 and np.isnan(zero.max_ratio)
    st = observability_probe(p, trials=4)
    assert len(st.ratios) == 4 and np.all(np.isfinite(st.ratios)) and st.max_ratio > 0
    const4 = np.zeros((4, p.dom.n))
    const4[3] = 1.0
    # j = 3 couples the fourth component into the observed ones
    assert observability_probe(p, terminal_data=[const4]).skipped == 0
    # j = 2: a constant fourth component is invisible once its mean is removed
    p2 = _p4_problem(2)
    assert observability_probe(p2, terminal_data=[const4]).skipped == 1
    with pytest.raises(ValueError):
        observability_probe(p, trials=0)
