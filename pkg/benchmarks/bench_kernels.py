"""Compare the numba sweeps with the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 61x200 101x400 201x800]

Each kernel runs on identical inputs in both backends; the table shows the
best-of-``repeat`` wall time, the speed-up and the max difference of the
outputs.  The first numba call per signature is excluded (JIT warm-up).
"""
import argparse
import time

import numpy as np

from rdcontrol._kernels import _numba_impl as nb
from rdcontrol._kernels import _numpy_impl as npy
from rdcontrol.structure import build_transformed_system

GUARD = 1e100


def _best(fn, repeat):
    out, best = None, np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(n, m):
    rng = np.random.default_rng(0)
    dt, dx = 1.0 / m, 1.0 / (n - 1)
    Dm = build_transformed_system(1, (1, 2, 3, 4), (1, 1, 1, 1)).D
    A = rng.standard_normal((m, 4, 4, n)) * 0.5
    z0 = rng.standard_normal((4, n))
    src = rng.standard_normal((m, 4, n))
    u0 = rng.uniform(0, 1, (4, n))
    d = np.array([1.0, 2.0, 3.0, 4.0])
    return {
        "linear_forward": lambda k: k.linear_forward(z0, Dm, A, src, dt, dx, m, GUARD)[0],
        "linear_adjoint": lambda k: k.linear_adjoint(z0, Dm, A, dt, dx, m)[0],
        "nonlinear_forward": lambda k: k.nonlinear_forward(u0, d, src, dt, dx, m, GUARD)[0],
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", nargs="+", default=["61x200", "101x400", "201x800"])
    a = ap.parse_args(argv)
    print(f"{'kernel':<18} {'n x m':>9} {'numba [ms]':>11} {'numpy [ms]':>11} {'speed-up':>9} {'max diff':>9}")
    for size in a.sizes:
        n, m = (int(v) for v in size.split("x"))
        for name, call in cases(n, m).items():
            call(nb)
            t_nb, r_nb = _best(lambda: call(nb), a.repeat)
            t_np, r_np = _best(lambda: call(npy), a.repeat)
            diff = float(np.max(np.abs(r_nb - r_np)))
            print(f"{name:<18} {size:>9} {1e3 * t_nb:>11.2f} {1e3 * t_np:>11.2f} "
                  f"{t_np / t_nb:>8.1f}x {diff:>9.1e}")


if __name__ == "__main__":
    main()
