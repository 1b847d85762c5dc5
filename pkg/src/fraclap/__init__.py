"""Finite element discretization and penalized controllability studies for
the one-dimensional integral fractional Laplacian.

Entry points
------------
- :mod:`fraclap.fe_core` -- meshes, mass/stiffness assembly, elliptic solves,
  closed-form benchmark, error norms and convergence studies.
- :mod:`fraclap.heat_solver` -- implicit Euler evolution, adjoint evolution,
  control-region mass matrices and a spectral reference solver.
- :mod:`fraclap.hum_control` -- penalized duality-based null control via
  conjugate gradients on the dual functional.
- :mod:`fraclap.constrained_control` -- nonnegative amplitude-penalized
  tracking controls and minimal-time estimation.
- :mod:`fraclap.exterior_control` -- Robin exterior-control approximation on
  an extended interval.
- :mod:`fraclap.simultaneous_control` -- simultaneous control of parameter
  families with deterministic and stochastic optimizers.
- :mod:`fraclap.cli` -- the ``fraclap`` command-line interface.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover - not installed
    __version__ = "0.0.0+uninstalled"

from . import errors
from .errors import (
    AssemblyError,
    BracketError,
    ConfigError,
    DimensionError,
    Divergence,
    DivergenceError,
    FraclapError,
    MeshAlignmentError,
    NonConvergence,
    NonConvergenceError,
    NumericalError,
    OracleError,
    SolveError,
)
from .fe_core import (
    FractionalOrder,
    SymDenseMatrix,
    UniformMesh1D,
    assemble_mass,
    assemble_stiffness,
    convergence_study,
    error_energy,
    error_l2,
    exact_getoor_solution,
    normalization_constant,
    prolongation,
    solve_elliptic,
)

__all__ = [
    "__version__",
    "errors",
    "FraclapError",
    "ConfigError",
    "NumericalError",
    "AssemblyError",
    "SolveError",
    "OracleError",
    "DimensionError",
    "MeshAlignmentError",
    "NonConvergenceError",
    "NonConvergence",
    "DivergenceError",
    "Divergence",
    "BracketError",
    "FractionalOrder",
    "UniformMesh1D",
    "SymDenseMatrix",
    "normalization_constant",
    "assemble_mass",
    "assemble_stiffness",
    "solve_elliptic",
    "exact_getoor_solution",
    "error_l2",
    "error_energy",
    "prolongation",
    "convergence_study",
]
