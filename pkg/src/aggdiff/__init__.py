"""Numerical laboratory for ``u_t = Lap u^m - div(u grad K_s * u)`` with Riesz kernels."""
from .grid import Field, GridSpec, integrate, lp_norm, read_snapshot, truncate_above, write_snapshot
from .fracops import KernelSpec, Mode, grad_riesz_potential, riesz_potential
from .drift import RegularizerSpec, drift_velocity, verify_div_decay
from .series import DiagnosticsSeries
from .solver import Adaptive, Fixed, SolverConfig, run, step
from .diagnostics import classify

__version__ = "0.1.0"

__all__ = [
    "Adaptive",
    "DiagnosticsSeries",
    "Field",
    "Fixed",
    "GridSpec",
    "KernelSpec",
    "Mode",
    "RegularizerSpec",
    "SolverConfig",
    "classify",
    "drift_velocity",
    "grad_riesz_potential",
    "integrate",
    "lp_norm",
    "read_snapshot",
    "riesz_potential",
    "run",
    "step",
    "truncate_above",
    "verify_div_decay",
    "write_snapshot",
    "__version__",
]
