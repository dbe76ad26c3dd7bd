"""Backend selection for the time-stepping sweeps.

The compiled (numba) backend is the default.  Setting the environment
variable ``RDCONTROL_NO_NUMBA=1`` before import selects the pure-numpy
fallback; so does a failed numba import.
"""
import os

from . import _numpy_impl as numpy_backend

numba_backend = None
if os.environ.get("RDCONTROL_NO_NUMBA", "").strip().lower() not in ("1", "true", "yes"):
    try:
        from . import _numba_impl as numba_backend
    except ImportError:  # pragma: no cover
        numba_backend = None

active = numba_backend if numba_backend is not None else numpy_backend
BACKEND = "numba" if active is numba_backend else "numpy"

linear_forward = active.linear_forward
linear_adjoint = active.linear_adjoint
nonlinear_forward = active.nonlinear_forward
