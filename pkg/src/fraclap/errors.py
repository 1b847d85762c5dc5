"""Exception types shared across the package.

Every numerical failure raised by the library derives from
:class:`NumericalError` and carries the name of the module that raised it,
so the command-line layer can report ``module: message`` and exit with the
numerical-failure status. Configuration problems derive from
:class:`ConfigError` and are reported before any computation starts.
"""

from __future__ import annotations

__all__ = [
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
]


class FraclapError(Exception):
    """Base class for all package-specific exceptions."""


class ConfigError(FraclapError):
    """Invalid, malformed, or unknown configuration input."""


class NumericalError(FraclapError):
    """Base class for failures of the numerical pipeline.

    Parameters
    ----------
    message : str
        Human-readable description of the failure.
    module : str, optional
        Dotted name of the module where the failure originated. Filled in
        at the raise site so command-line diagnostics can point at the
        responsible component.
    """

    def __init__(self, message: str, *, module: str | None = None):
        super().__init__(message)
        self.module = module


class AssemblyError(NumericalError):
    """Matrix assembly produced an invalid result.

    Attributes
    ----------
    band : int or None
        Offending band index (distance from the diagonal) when the failure
        concerns the sign or finiteness of a Toeplitz band.
    """

    def __init__(self, message: str, *, band: int | None = None,
                 module: str | None = None):
        super().__init__(message, module=module)
        self.band = band


class SolveError(NumericalError):
    """A direct linear solve failed or exceeded its residual contract."""


class OracleError(NumericalError):
    """An eigendecomposition-based reference solution could not be built."""


class DimensionError(NumericalError):
    """Operands with incompatible sizes or non-nested meshes."""


class MeshAlignmentError(NumericalError):
    """A mesh does not place nodes where the geometry requires them."""


class NonConvergenceError(NumericalError):
    """An iterative method hit its iteration cap before its tolerance.

    Attributes
    ----------
    residual : float or None
        Last residual (or stationarity) measure before giving up.
    best : object or None
        Best iterate reached, when the caller may still want it.
    """

    def __init__(self, message: str, *, residual: float | None = None,
                 best=None, module: str | None = None):
        super().__init__(message, module=module)
        self.residual = residual
        self.best = best


class DivergenceError(NumericalError):
    """An iteration made the objective grow instead of shrink."""


class BracketError(NumericalError):
    """A bisection bracket does not straddle the feasibility boundary."""


# Short aliases for the two names that read better without the suffix.
NonConvergence = NonConvergenceError
Divergence = DivergenceError
