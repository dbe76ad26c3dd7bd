import subprocess
import sys
import textwrap

import numpy as np
import pytest

from rdcontrol.cli import emit_plotdata, load_config, main
from rdcontrol.grid import Domain1D
from rdcontrol.simulate import TimeGrid, simulate_nonlinear


def _write(tmp_path, body, name="exp.ini"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(body), encoding="utf-8")
    return p


def _summary(path):
    out = {}
    for line in path.read_text().splitlines():
        k, v = line.split(" = ", 1)
        out[k] = v
    return out


def _csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


SIM = """
[experiment]
kind = simulate
output = out
[domain]
n = 41
[time]
T = 0.5
m = 50
[initial]
type = constant
value = 1 1 1 1
[output]
plot_times = 0 0.5
"""


def test_simulate_constant(tmp_path):
    cfg = _write(tmp_path, SIM)
    assert main(["run", str(cfg)]) == 0
    s = _summary(tmp_path / "out" / "summary")
    assert s["status"] == "ok" and float(s["mass_drift_u3u4"]) <= 1e-10
    traj = _csv(tmp_path / "out" / "trajectory.csv")
    assert np.all(traj[:, 2:6] == 1.0)
    snap = _csv(tmp_path / "out" / "plotdata" / "snapshot_000000.csv")
    np.testing.assert_array_equal(snap[:, 1:], 1.0)


def test_summary_recomputable(tmp_path):
    cfg = _write(tmp_path, SIM.replace("type = constant\nvalue = 1 1 1 1",
                                       "type = random\nlow = 0\nhigh = 2") + "stride = 5\n")
    assert main(["run", str(cfg)]) == 0
    s = _summary(tmp_path / "out" / "summary")
    diag = np.genfromtxt(tmp_path / "out" / "diagnostics.csv", delimiter=",", names=True)
    for name in ("u1u2", "u1u4", "u2u3", "u3u4"):
        q = diag[f"mass_{name}"]
        drift = np.max(np.abs(q - q[0])) / max(abs(q[0]), np.max(np.abs(q)))
        assert drift == float(s[f"mass_drift_{name}"])
    traj = _csv(tmp_path / "out" / "trajectory.csv")
    last = traj[traj[:, 0] == traj[-1, 0]]
    assert np.max(np.abs(last[:, 2:6] - 1.0)) == float(s["terminal_linf_error"])


def test_random_initial_matches_seed(tmp_path):
    cfg = _write(tmp_path, SIM.replace("type = constant\nvalue = 1 1 1 1", "type = random"))
    c = load_config(cfg)
    np.testing.assert_array_equal(c.u0, np.random.default_rng(0).uniform(0, 1, (4, 41)))


def test_reruns_byte_identical(tmp_path):
    cfg = _write(tmp_path, SIM.replace("type = constant\nvalue = 1 1 1 1", "type = random"))
    assert main(["run", str(cfg)]) == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "out").rglob("*") if p.is_file()}
    assert main(["run", str(cfg)]) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "out").rglob("*") if p.is_file()}
    assert first == second and len(first) >= 5
    assert b"\r\n" not in first["trajectory.csv"]


def test_kalman_uncontrollable(tmp_path):
    cfg = _write(tmp_path, """
    [experiment]
    kind = kalman
    output = k
    [system]
    ustar = 0 1 0 0
    j = 3
    """)
    assert main(["run", str(cfg)]) == 0
    s = _summary(tmp_path / "k" / "summary")
    assert s["controllable"] == "false" and int(s["max_rank"]) <= 3
    assert np.all(_csv(tmp_path / "k" / "diagnostics.csv")[:, 2] <= 3)


def test_control_local(tmp_path):
    cfg = _write(tmp_path, """
    [experiment]
    kind = control-local
    output = loc
    [domain]
    n = 41
    [time]
    m = 100
    [initial]
    type = constant-plus-bump
    bump_amplitude = 0.01 -0.01 0.01 -0.01
    [output]
    plot_times = 1
    plot_fields = u1 u2 u3 u4 h1 h3
    """)
    assert main(["run", str(cfg)]) == 0
    s = _summary(tmp_path / "loc" / "summary")
    assert s["converged"] == "true" and float(s["terminal_linf_error"]) <= 1e-3
    snap = _csv(tmp_path / "loc" / "plotdata" / "snapshot_000100.csv")
    np.testing.assert_allclose(snap[:, 1:5], 1.0, atol=1e-3)
    assert np.all(snap[:, 5:] == 0)


@pytest.mark.parametrize("body,key", [
    ("[experiment]\nkind = nonsense\n", "experiment.kind"),
    ("[experiment]\nkind = simulate\n[system]\nustar = 1 1 2 1\n", "system.ustar"),
    ("[experiment]\nkind = simulate\n[domain]\nn = x\n", "domain.n"),
    ("[experiment]\nkind = simulate\n[output]\nplot_fields = u1 h4\n", "output.plot_fields"),
    ("[experiment]\nkind = control-local\n[system]\nj = 2\n[initial]\nvalue = 2 2 2 2\n", "initial"),
])
def test_config_errors(tmp_path, body, key, capsys):
    cfg = _write(tmp_path, body)
    assert main(["validate", str(cfg)]) == 2
    assert main(["run", str(cfg)]) == 2
    assert f"[{key}]" in capsys.readouterr().err


def test_validate_ok(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path, SIM))]) == 0
    assert not (tmp_path / "out").exists()


def test_runtime_error_exit_1(tmp_path):
    cfg = _write(tmp_path, """
    [experiment]
    kind = control-local
    output = bad
    [domain]
    n = 41
    [time]
    m = 100
    [fixed_point]
    max_outer_iterations = 1
    [initial]
    type = constant-plus-bump
    bump_amplitude = 0.01 -0.01 0.01 -0.01
    """)
    assert main(["run", str(cfg)]) == 1
    s = _summary(tmp_path / "bad" / "summary")
    assert s["status"] == "error" and "contraction" in s["error"]


def test_emit_plotdata_guards(tmp_path):
    dom = Domain1D(n=21)
    tr = simulate_nonlinear(np.ones((4, 21)), TimeGrid(1.0, 10), (1, 2, 3, 4), dom,
                            np.zeros((10, 3, 21)))
    with pytest.raises(ValueError, match="h4"):
        emit_plotdata(tr, ["h4"], [0.0], tmp_path)
    with pytest.raises(ValueError):
        emit_plotdata(tr, ["u1"], [2.0], tmp_path)
    with pytest.raises(ValueError):
        emit_plotdata(tr, ["v1"], [0.0], tmp_path)
    (p,) = emit_plotdata(tr, ["u1", "h3"], [0.0], tmp_path)
    assert p.read_text().splitlines()[0] == "x,u1,h3"


def test_console_script(tmp_path):
    cfg = _write(tmp_path, SIM)
    r = subprocess.run([sys.executable, "-m", "rdcontrol.cli", "validate", str(cfg)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout
