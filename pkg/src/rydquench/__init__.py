"""Quench dynamics of a square-lattice Rydberg Ising model.

Linked-cluster expansion and exact diagonalization of the driven Ising
Hamiltonian, snapshot sampling and correlator analysis, and the
(C6, alpha) fit of sudden-quench scans.
"""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

from .errors import CapacityError, ConfigError, NumericalError  # noqa: E402
from .lattice import Cutoff, InteractionModel, LatticeGeometry  # noqa: E402
from .model import Schedule, build_hamiltonian, ramp_schedule, sudden_schedule  # noqa: E402

__all__ = ["CapacityError", "ConfigError", "NumericalError", "Cutoff", "InteractionModel",
           "LatticeGeometry", "Schedule", "build_hamiltonian", "ramp_schedule", "sudden_schedule",
           "__version__"]
