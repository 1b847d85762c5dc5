"""Penalized-duality computation of distributed null controls.

The primal problem is to steer the fractional heat equation close to zero:
minimize ``(1/2) ||u||^2_{L2(w x (0,T))} + (1/(2 beta)) ||y(T)||^2_{L2}``
over controls supported in a subinterval ``w``. Its dual in the terminal
adjoint datum ``q`` is the quadratic functional

    J(q) = (dt/2) sum_m p_m^T B p_m + (beta/2) <q, q>_M + <q, xi>_M,

where ``p`` is the backward trajectory started at ``q``, ``B`` the control
mass matrix of ``w`` and ``xi`` the terminal state of the uncontrolled
forward evolution. The gradient of ``J`` in the mass inner product is
``Gram(q) + beta q + xi`` with the controllability Gramian
``Gram(q) = terminal state of the forward sweep driven by the adjoint``.
The minimizer solves ``(Gram + beta I) q = -xi``, which is handled by
conjugate gradients formulated entirely in the mass inner product.

Index convention (see :mod:`fraclap.heat_solver`): the step arriving at
level ``m`` consumes ``controls[m]``, and the discrete duality identity
pairs it with the adjoint at the *previous* level. The optimal control
therefore reads ``controls[m] = p_states[m - 1]`` for ``m >= 1`` (with the
unused row 0 left at zero); this offset is what makes the discrete
optimality system close exactly rather than up to ``O(dt)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonConvergenceError
from .fe_core import (
    NodalVector,
    SymDenseMatrix,
    UniformMesh1D,
    _order_value,
    assemble_mass,
)
from .heat_solver import (
    ControlRegion,
    TimeGrid,
    Trajectory,
    adjoint_evolution,
    assemble_control_matrix,
    forward_evolution,
    mass_inner,
    mass_norm,
)

__all__ = [
    "penalty_rule",
    "control_cost",
    "dual_functional_and_gradient",
    "HUMResult",
    "solve_hum",
    "PenaltyStudyRow",
    "penalty_study",
]

_MODULE = "fraclap.hum_control"


def penalty_rule(s, h: float) -> float:
    """Mesh-tied penalty weight: ``h^(4s)`` below order 1/2, else ``h^2``.

    Matches the approximation power of the scheme so that the penalized
    problem behaves like exact null control when the order is large enough
    for the equation to be controllable, and degrades gracefully otherwise.
    """
    s = _order_value(s)
    if not (0.0 < h):
        raise ValueError(f"mesh width must be positive, got {h!r}")
    return h ** (4.0 * s) if s < 0.5 else h**2


def control_cost(grid: TimeGrid, B: SymDenseMatrix, controls: np.ndarray) -> float:
    """Discrete ``L2(w x (0,T))`` norm of a control array.

    ``sqrt(dt * sum_m controls[m]^T B controls[m])`` over the consumed
    levels ``m >= 1``.
    """
    contributions = [
        float(controls[m] @ (B.entries @ controls[m]))
        for m in range(1, grid.n_levels)
    ]
    return math.sqrt(max(grid.dt * sum(contributions), 0.0))


def _gramian_apply(
    mesh: UniformMesh1D,
    s: float,
    grid: TimeGrid,
    B: SymDenseMatrix,
    q: NodalVector,
) -> tuple[NodalVector, Trajectory, Trajectory]:
    """Controllability Gramian: adjoint sweep from ``q``, forward sweep
    driven by it. Returns the terminal state plus both trajectories."""
    p = adjoint_evolution(mesh, s, grid, q)
    controls = np.zeros_like(p.states)
    controls[1:] = p.states[:-1]
    y = forward_evolution(mesh, s, grid, np.zeros(len(q)), controls, B)
    return y.terminal, p, y


def dual_functional_and_gradient(
    mesh: UniformMesh1D,
    s,
    grid: TimeGrid,
    region: ControlRegion,
    y0: NodalVector,
    penalty: float,
    q: NodalVector,
) -> tuple[float, NodalVector]:
    """Value and Euclidean gradient of the dual functional at ``q``.

    The gradient returned is the plain partial-derivative vector (the mass
    matrix applied to the inner-product gradient), so it can be compared
    directly against finite differences of the value.
    """
    s = _order_value(s)
    B = assemble_control_matrix(mesh, region)
    M = assemble_mass(mesh)
    xi = forward_evolution(mesh, s, grid, y0).terminal
    gram_q, p, _ = _gramian_apply(mesh, s, grid, B, np.asarray(q, dtype=float))
    quad = sum(
        float(p.states[m] @ (B.entries @ p.states[m]))
        for m in range(grid.n_levels - 1)
    )
    value = (
        0.5 * grid.dt * quad
        + 0.5 * penalty * mass_inner(M, q, q)
        + mass_inner(M, q, xi)
    )
    gradient = M.entries @ (gram_q + penalty * np.asarray(q) + xi)
    return value, gradient


@dataclass
class HUMResult:
    """Optimal penalized control and its diagnostics."""

    controls: np.ndarray  # (n_levels, n_dof); row 0 is zero by convention
    state: Trajectory  # controlled forward trajectory
    adjoint: Trajectory  # optimal adjoint trajectory
    penalty: float
    cost: float  # discrete L2(w x (0,T)) norm of the control
    terminal_norm: float  # mass norm of the controlled terminal state
    optimal_energy: float  # cost^2/2 + terminal_norm^2/(2 beta)
    iterations: int
    residual: float  # relative mass-norm residual of the dual system


def solve_hum(
    mesh: UniformMesh1D,
    s,
    grid: TimeGrid,
    y0: NodalVector,
    region: ControlRegion,
    penalty: float | None = None,
    tol: float = 1e-8,
    max_iter: int | None = None,
) -> HUMResult:
    """Minimize the penalized control functional by dual conjugate gradients.

    Parameters
    ----------
    penalty : float, optional
        Terminal penalty weight ``beta``; defaults to :func:`penalty_rule`.
    tol : float
        Relative mass-norm residual of the dual optimality system.
    max_iter : int, optional
        Defaults to ``2 * n_dof + 50``; exceeding it raises
        :class:`~fraclap.errors.NonConvergenceError` carrying the last
        relative residual.
    """
    s = _order_value(s)
    beta = penalty_rule(s, mesh.h) if penalty is None else float(penalty)
    if not (beta > 0.0):
        raise ValueError(f"penalty must be positive, got {beta!r}")
    B = assemble_control_matrix(mesh, region)
    M = assemble_mass(mesh)
    y0 = np.asarray(y0, dtype=float)
    xi = forward_evolution(mesh, s, grid, y0).terminal
    n = len(xi)
    if max_iter is None:
        max_iter = 2 * n + 50

    def operator(q: NodalVector) -> NodalVector:
        gram_q, _, _ = _gramian_apply(mesh, s, grid, B, q)
        return gram_q + beta * q

    # conjugate gradients in the mass inner product, started at zero
    b = -xi
    norm_b = mass_norm(M, b)
    q = np.zeros(n)
    iterations = 0
    if norm_b == 0.0:
        relres = 0.0
    else:
        r = b.copy()
        d = r.copy()
        rho = mass_inner(M, r, r)
        relres = math.sqrt(rho) / norm_b
        while relres > tol:
            if iterations >= max_iter:
                raise NonConvergenceError(
                    f"dual conjugate gradients stalled at relative residual "
                    f"{relres:.3e} after {iterations} iterations",
                    residual=relres,
                    module=_MODULE,
                )
            Kd = operator(d)
            alpha = rho / mass_inner(M, d, Kd)
            q = q + alpha * d
            r = r - alpha * Kd
            rho_next = mass_inner(M, r, r)
            d = r + (rho_next / rho) * d
            rho = rho_next
            relres = math.sqrt(max(rho, 0.0)) / norm_b
            iterations += 1

    # final sweeps at the solution: optimal adjoint, control and state
    p = adjoint_evolution(mesh, s, grid, q)
    controls = np.zeros_like(p.states)
    controls[1:] = p.states[:-1]
    y = forward_evolution(mesh, s, grid, y0, controls, B)
    cost = control_cost(grid, B, controls)
    terminal = mass_norm(M, y.terminal)
    energy = 0.5 * cost**2 + terminal**2 / (2.0 * beta)
    return HUMResult(
        controls=controls,
        state=y,
        adjoint=p,
        penalty=beta,
        cost=cost,
        terminal_norm=terminal,
        optimal_energy=energy,
        iterations=iterations,
        residual=relres,
    )


@dataclass(frozen=True)
class PenaltyStudyRow:
    """One mesh level of the vanishing-penalty study."""

    h: float
    penalty: float
    cost: float
    terminal_norm: float
    iterations: int


def penalty_study(
    s,
    h_sequence: Sequence[float],
    region: ControlRegion,
    horizon: float,
    n_levels: int,
    initial_profile: Callable[[np.ndarray], np.ndarray],
    interval: tuple[float, float] = (-1.0, 1.0),
    tol: float = 1e-7,
) -> list[PenaltyStudyRow]:
    """Refine the mesh with the penalty tied to it and record cost and
    terminal norm at each level.

    The two regimes this reveals: when the control problem is solvable the
    cost stays bounded while the terminal norm decays linearly in ``h``;
    when it is not, the cost blows up and the terminal norm stagnates.
    """
    s = _order_value(s)
    rows = []
    for h in sorted(float(h) for h in h_sequence)[::-1]:
        mesh = UniformMesh1D.from_h(interval[0], interval[1], h)
        grid = TimeGrid(horizon, n_levels)
        y0 = initial_profile(mesh.interior_nodes)
        result = solve_hum(mesh, s, grid, y0, region, tol=tol)
        rows.append(
            PenaltyStudyRow(
                h=mesh.h,
                penalty=result.penalty,
                cost=result.cost,
                terminal_norm=result.terminal_norm,
                iterations=result.iterations,
            )
        )
    return rows
