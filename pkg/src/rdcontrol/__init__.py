"""Localized control of the reversible reaction system U1 + U3 <-> U2 + U4."""
from ._kernels import BACKEND
from .grid import Domain1D
from .simulate import TimeGrid, Trajectory

__all__ = ["BACKEND", "Domain1D", "TimeGrid", "Trajectory"]
__version__ = "0.1.0"
