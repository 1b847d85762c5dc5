"""Implicit time stepping for the fractional heat equation.

Discretizes ``M y' + A y = B u`` (mass matrix ``M``, fractional stiffness
``A``, control injection ``B``) with backward Euler on a uniform grid of
``n_levels`` time levels spaced ``dt = horizon / n_levels`` apart. A
trajectory stores all levels: ``states[0]`` is the initial datum at time 0
and ``states[-1]`` the terminal state at time ``(n_levels - 1) * dt``, one
step short of the nominal horizon; every comparison in this package is made
at that discrete terminal time.

Controls are sampled on the same grid and enter the step from level ``m`` to
``m + 1`` through the value at the *arrival* level: the row ``controls[0]``
is never consumed. The backward (adjoint) evolution applies the transpose
scheme, which makes the discrete duality identity

    <y[-1], p[-1]>_M  =  <y[0], p[0]>_M + dt * sum_m controls[m]^T B p[m-1]

hold to round-off; optimization modules rely on it bitwise rather than on
its continuous counterpart.

All linear solves share one Cholesky factorization of the symmetrically
Jacobi-scaled step matrix ``M + dt A``; the scaling keeps the factorization
accurate for the extremely stiff operators that arise elsewhere in the
package, at no cost in the well-conditioned cases.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg

from .errors import DimensionError, SolveError
from .fe_core import (
    NodalVector,
    SymDenseMatrix,
    UniformMesh1D,
    _order_value,
    assemble_mass,
    assemble_stiffness,
)

__all__ = [
    "TimeGrid",
    "Trajectory",
    "ControlRegion",
    "ImplicitEulerSystem",
    "assemble_control_matrix",
    "forward_evolution",
    "adjoint_evolution",
    "mass_inner",
    "mass_norm",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

_MODULE = "fraclap.heat_solver"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid with ``n_levels`` levels spaced ``horizon/n_levels``.

    Level ``m`` sits at time ``m * dt``; the last level is one step short of
    the nominal horizon.
    """

    horizon: float
    n_levels: int

    def __post_init__(self):
        if not (self.horizon > 0.0) or not math.isfinite(self.horizon):
            raise ValueError(f"horizon must be positive, got {self.horizon!r}")
        if int(self.n_levels) != self.n_levels or self.n_levels < 2:
            raise ValueError(f"need at least two time levels, got {self.n_levels!r}")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "n_levels", int(self.n_levels))

    @property
    def dt(self) -> float:
        """Step size ``horizon / n_levels``."""
        return self.horizon / self.n_levels

    @property
    def times(self) -> np.ndarray:
        """Times of all levels, ``m * dt`` for ``m = 0 .. n_levels - 1``."""
        return self.dt * np.arange(self.n_levels)

    @property
    def terminal_time(self) -> float:
        """Time of the last stored level, ``(n_levels - 1) * dt``."""
        return self.dt * (self.n_levels - 1)


@dataclass
class Trajectory:
    """All time levels of an evolution, one row per level."""

    grid: TimeGrid
    states: np.ndarray  # shape (n_levels, n_dof)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] != self.grid.n_levels:
            raise DimensionError(
                f"trajectory needs shape ({self.grid.n_levels}, n_dof), got "
                f"{self.states.shape}",
                module=_MODULE,
            )

    @property
    def initial(self) -> NodalVector:
        return self.states[0]

    @property
    def terminal(self) -> NodalVector:
        return self.states[-1]

    @property
    def n_dof(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class ControlRegion:
    """Open subinterval ``(lo, hi)`` where distributed controls act."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (self.hi > self.lo):
            raise ValueError(
                f"control region must satisfy lo < hi, got ({self.lo}, {self.hi})"
            )


def _as_entries(matrix) -> np.ndarray:
    if isinstance(matrix, SymDenseMatrix):
        return matrix.entries
    return np.asarray(matrix, dtype=float)


def mass_inner(mass, u: NodalVector, v: NodalVector) -> float:
    """Weighted inner product ``u^T M v``."""
    m = _as_entries(mass)
    return float(np.asarray(u) @ (m @ np.asarray(v)))


def mass_norm(mass, u: NodalVector) -> float:
    """Weighted norm ``sqrt(u^T M u)`` (clipped at zero against round-off)."""
    return math.sqrt(max(mass_inner(mass, u, u), 0.0))


class ImplicitEulerSystem:
    """Backward-Euler stepper for ``M y' + A y = r`` with a frozen step size.

    The step matrix ``M + dt A`` is factorized once with a symmetric Jacobi
    rescaling, so repeated forward/backward sweeps cost one triangular solve
    per level.
    """

    def __init__(self, mass, operator, dt: float):
        if not (dt > 0.0) or not math.isfinite(dt):
            raise ValueError(f"step size must be positive, got {dt!r}")
        self.mass = _as_entries(mass)
        self.operator = _as_entries(operator)
        if self.mass.shape != self.operator.shape:
            raise DimensionError(
                f"mass and operator shapes differ: {self.mass.shape} vs "
                f"{self.operator.shape}",
                module=_MODULE,
            )
        self.dt = float(dt)
        step = self.mass + self.dt * self.operator
        diag = np.diag(step).copy()
        if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
            raise SolveError(
                "step matrix has a non-positive diagonal; the system is not "
                "positive definite",
                module=_MODULE,
            )
        self._scale = 1.0 / np.sqrt(diag)
        scaled = step * self._scale[:, None] * self._scale[None, :]
        scaled = 0.5 * (scaled + scaled.T)
        try:
            self._factor = linalg.cho_factor(scaled)
        except linalg.LinAlgError as exc:
            raise SolveError(
                f"step matrix factorization failed: {exc}", module=_MODULE
            ) from exc

    @property
    def n_dof(self) -> int:
        return self.mass.shape[0]

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._scale * linalg.cho_solve(self._factor, self._scale * rhs)

    def step(self, y: NodalVector, load: NodalVector | None = None) -> NodalVector:
        """Advance one level: solve ``(M + dt A) y_next = M y + dt * load``."""
        rhs = self.mass @ y
        if load is not None:
            rhs = rhs + self.dt * load
        return self._solve(rhs)

    def back_step(self, p: NodalVector, load: NodalVector | None = None) -> NodalVector:
        """Recede one level with the transpose scheme:
        ``(M + dt A) p_prev = M p + dt * load``."""
        return self.step(p, load)


@lru_cache(maxsize=16)
def _cached_system(mesh: UniformMesh1D, s: float, dt: float) -> ImplicitEulerSystem:
    A = assemble_stiffness(mesh, s)
    M = assemble_mass(mesh)
    return ImplicitEulerSystem(M, A, dt)


def evolution_system(mesh: UniformMesh1D, s, grid: TimeGrid) -> ImplicitEulerSystem:
    """Stepper for the fractional heat equation on ``mesh`` with order ``s``."""
    return _cached_system(mesh, _order_value(s), grid.dt)


def assemble_control_matrix(mesh: UniformMesh1D, region: ControlRegion) -> SymDenseMatrix:
    """Mass matrix restricted to the control region: ``int_w phi_i phi_j``.

    Each element is clipped to the region and the quadratic integrand is
    integrated exactly with Simpson's rule, so partially covered elements
    contribute their exact share.
    """
    n = mesh.n_interior
    nodes = mesh.nodes
    h = mesh.h
    entries = np.zeros((n, n))
    for k in range(n + 1):  # element between nodes k and k+1
        a = max(nodes[k], region.lo)
        b = min(nodes[k + 1], region.hi)
        if b <= a:
            continue

        def left(x):
            return (nodes[k + 1] - x) / h

        def right(x):
            return (x - nodes[k]) / h

        mid = 0.5 * (a + b)
        w = (b - a) / 6.0

        def simpson(f, g):
            return w * (f(a) * g(a) + 4.0 * f(mid) * g(mid) + f(b) * g(b))

        il, ir = k - 1, k  # interior indices of the two local hats
        if il >= 0:
            entries[il, il] += simpson(left, left)
        if ir < n:
            entries[ir, ir] += simpson(right, right)
        if il >= 0 and ir < n:
            val = simpson(left, right)
            entries[il, ir] += val
            entries[ir, il] += val
    return SymDenseMatrix(entries)


def _check_controls(controls: np.ndarray, grid: TimeGrid, n: int) -> np.ndarray:
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (grid.n_levels, n):
        raise DimensionError(
            f"controls need shape ({grid.n_levels}, {n}), got {controls.shape}",
            module=_MODULE,
        )
    return controls


def march_forward(
    system: ImplicitEulerSystem,
    grid: TimeGrid,
    y0: NodalVector,
    controls: np.ndarray | None = None,
    control_matrix=None,
) -> Trajectory:
    """March any implicit Euler system forward from ``y0``.

    ``controls[m]`` is consumed by the step arriving at level ``m`` (so the
    first row is ignored); omit both control arguments for free decay.
    """
    n = system.n_dof
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (n,):
        raise DimensionError(
            f"initial state needs shape ({n},), got {y0.shape}", module=_MODULE
        )
    if (controls is None) != (control_matrix is None):
        raise ValueError("pass controls and control_matrix together")
    states = np.empty((grid.n_levels, n))
    states[0] = y0
    if controls is None:
        for m in range(grid.n_levels - 1):
            states[m + 1] = system.step(states[m])
    else:
        controls = _check_controls(controls, grid, n)
        B = _as_entries(control_matrix)
        for m in range(grid.n_levels - 1):
            states[m + 1] = system.step(states[m], B @ controls[m + 1])
    return Trajectory(grid=grid, states=states)


def march_backward(
    system: ImplicitEulerSystem, grid: TimeGrid, terminal: NodalVector
) -> Trajectory:
    """March the transpose scheme backward from a terminal datum.

    Returns the full trajectory aligned with the forward one: ``states[-1]``
    is the given terminal value, ``states[0]`` the earliest level.
    """
    n = system.n_dof
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (n,):
        raise DimensionError(
            f"terminal state needs shape ({n},), got {terminal.shape}", module=_MODULE
        )
    states = np.empty((grid.n_levels, n))
    states[-1] = terminal
    for m in range(grid.n_levels - 2, -1, -1):
        states[m] = system.back_step(states[m + 1])
    return Trajectory(grid=grid, states=states)


def forward_evolution(
    mesh: UniformMesh1D,
    s,
    grid: TimeGrid,
    y0: NodalVector,
    controls: np.ndarray | None = None,
    control_matrix: SymDenseMatrix | None = None,
) -> Trajectory:
    """March ``M y' + A y = B u`` forward from ``y0`` (see
    :func:`march_forward` for the control convention)."""
    return march_forward(
        evolution_system(mesh, s, grid), grid, y0, controls, control_matrix
    )


def adjoint_evolution(
    mesh: UniformMesh1D, s, grid: TimeGrid, terminal: NodalVector
) -> Trajectory:
    """March the transpose fractional heat scheme backward from a terminal
    datum; the result is level-aligned with the forward trajectory."""
    return march_backward(evolution_system(mesh, s, grid), grid, terminal)


def write_trajectory_csv(trajectory: Trajectory, path) -> None:
    """Serialize a trajectory: header ``time,node_0,...``, one row per level."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time"] + [f"node_{j}" for j in range(trajectory.n_dof)])
        for t, row in zip(trajectory.grid.times, trajectory.states):
            writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a trajectory CSV; returns ``(times, states)`` arrays."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "time" or len(header) < 2:
            raise ValueError(f"unexpected trajectory CSV header: {header!r}")
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows)
    return data[:, 0], data[:, 1:]
