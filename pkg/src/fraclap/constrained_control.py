"""Non-negative tracking controls and minimal-horizon estimation.

Steers the fractional heat model toward the terminal state of a reference
trajectory driven by a constant positive forcing, using controls that are
pointwise non-negative.  The sup-norm of the control is charged (not its
square), which concentrates the optimal control in space and time as the
horizon shrinks toward the smallest one admitting non-negative controls;
that smallest horizon is located by bisection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import BracketError, DimensionError, NonConvergenceError
from .fe_core import UniformMesh1D, _order_value, assemble_mass
from .heat_solver import (
    ControlRegion,
    TimeGrid,
    Trajectory,
    adjoint_evolution,
    assemble_control_matrix,
    forward_evolution,
    mass_norm,
)

__all__ = [
    "TrackingTarget",
    "reference_trajectory",
    "ConstrainedResult",
    "tracking_objective",
    "constrained_tracking",
    "control_mass_concentration",
    "BisectionPoint",
    "MinTimeResult",
    "min_time_estimate",
]

_MODULE = "fraclap.constrained_control"

#: Exponent of the smooth surrogate for the control's sup norm.  A weighted
#: l^power mean with probability weights is exact on constant controls and
#: approaches the maximum from below as the exponent grows.
SUP_NORM_POWER = 8


def _region_mask(control_matrix) -> np.ndarray:
    """Boolean mask of mesh functions whose support meets the region."""
    return np.abs(control_matrix.entries).sum(axis=1) > 0.0


@dataclass(frozen=True)
class TrackingTarget:
    """Reference trajectory data the controlled system should match at T.

    ``controls`` holds the constant forcing realized on the space-time
    lattice (strictly positive on the acting region, rows after the first),
    and ``terminal`` the reference state it produces at the final time.
    """

    initial: np.ndarray
    level: float
    controls: np.ndarray
    terminal: np.ndarray


def reference_trajectory(
    mesh: UniformMesh1D,
    s,
    grid: TimeGrid,
    region: ControlRegion,
    initial,
    level: float,
) -> TrackingTarget:
    """Drive a reference solution with a constant admissible forcing level.

    The forcing enters through the same region-weighted operator as the
    control and must be strictly positive, so the reference is an
    admissible point of the non-negative control problem.
    """
    level = float(level)
    if not (level > 0.0) or not math.isfinite(level):
        raise ValueError(f"forcing level must be positive, got {level!r}")
    s = _order_value(s)
    initial = np.asarray(initial, dtype=float)
    if initial.shape != (mesh.n_interior,):
        raise DimensionError(
            f"reference initial state has shape {initial.shape}, expected "
            f"({mesh.n_interior},)",
            module=_MODULE,
        )
    B = assemble_control_matrix(mesh, region)
    mask = _region_mask(B)
    controls = np.zeros((grid.n_levels, mesh.n_interior))
    controls[1:, mask] = level
    state = forward_evolution(mesh, s, grid, initial, controls, B)
    return TrackingTarget(
        initial=initial,
        level=level,
        controls=controls,
        terminal=state.terminal,
    )


def tracking_objective(
    mesh: UniformMesh1D,
    s,
    grid: TimeGrid,
    region: ControlRegion,
    y0,
    target_terminal,
    penalty: float,
    controls,
    power: int = SUP_NORM_POWER,
) -> tuple[float, np.ndarray]:
    """Smoothed tracking objective and its exact discrete gradient.

    Value: half the region-weighted l^power mean of the control plus the
    squared terminal mismatch over twice the penalty.  The gradient is the
    adjoint-based derivative for the implicit-Euler dynamics; it vanishes
    identically on mesh functions that never meet the control region.
    """
    s = _order_value(s)
    if not (penalty > 0.0) or not math.isfinite(penalty):
        raise ValueError(f"penalty must be positive, got {penalty!r}")
    if power < 2 or power % 2 != 0:
        raise ValueError(f"surrogate exponent must be even and >= 2, got {power}")
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (grid.n_levels, mesh.n_interior):
        raise DimensionError(
            f"controls have shape {controls.shape}, expected "
            f"({grid.n_levels}, {mesh.n_interior})",
            module=_MODULE,
        )
    B = assemble_control_matrix(mesh, region)
    M = assemble_mass(mesh)
    target_terminal = np.asarray(target_terminal, dtype=float)

    # probability weights on admissible cells: lumped region measure x dt
    node_weights = B.entries.sum(axis=1)
    cell_weights = np.zeros_like(controls)
    cell_weights[1:] = grid.dt * node_weights[None, :]
    cell_weights /= cell_weights.sum()

    mean_pow = float(np.sum(cell_weights * controls**power))
    sup_proxy = mean_pow ** (1.0 / power)
    grad = np.zeros_like(controls)
    if sup_proxy > 0.0:
        grad = 0.5 * cell_weights * (controls / sup_proxy) ** (power - 1)

    y = forward_evolution(mesh, s, grid, y0, controls, B)
    mismatch = y.terminal - target_terminal
    gap_sq = float(mismatch @ (M.entries @ mismatch))
    value = 0.5 * sup_proxy + gap_sq / (2.0 * penalty)
    p = adjoint_evolution(mesh, s, grid, mismatch / penalty)
    grad[1:] += grid.dt * (p.states[:-1] @ B.entries)
    return value, grad


@dataclass
class ConstrainedResult:
    """Non-negative tracking control and its diagnostics."""

    controls: np.ndarray  # (n_levels, n_dof), entrywise >= 0
    state: Trajectory  # controlled forward trajectory
    feasible: bool  # terminal_gap <= gap_tol
    terminal_gap: float  # mass-norm distance to the target terminal state
    gap_tol: float
    horizon: float  # time horizon actually used
    objective: float  # final smoothed objective value
    sup_norm: float  # largest control entry
    state_min: float  # most negative state entry (positivity diagnostic)
    iterations: int


def constrained_tracking(
    mesh: UniformMesh1D,
    s,
    grid: TimeGrid,
    y0,
    region: ControlRegion,
    target: TrackingTarget,
    penalty: float = 1e-10,
    gap_tol: float | None = None,
    power: int = SUP_NORM_POWER,
    max_iter: int = 12000,
    stage_iter: int = 600,
) -> ConstrainedResult:
    """Minimize the smoothed sup-norm tracking objective over controls >= 0.

    Bound-projected quasi-Newton iterations on the cells meeting the
    control region, warm-started through a decreasing-penalty continuation
    (each stage divides the penalty by 100 until the requested value is
    reached); plain descent without continuation stalls far from the
    optimum once the terminal term dominates.  The final stage runs in
    restarts of ``stage_iter`` iterations and stops once the terminal gap
    stabilizes between restarts.  The returned control is entrywise
    non-negative by construction.

    Parameters
    ----------
    penalty : float
        Terminal penalty weight; small values chase the best terminal
        match the non-negativity constraint admits.
    gap_tol : float, optional
        Feasibility threshold on the terminal gap; defaults to
        ``1e-3 x`` the mass norm of the target terminal state.
    max_iter : int
        Total iteration cap of the final continuation stage; exhausting it
        without the gap stabilizing raises
        :class:`~fraclap.errors.NonConvergenceError` with the last
        iterate's result on its ``best`` attribute.
    stage_iter : int
        Iteration cap of each warm-up stage and of each final-stage
        restart.
    """
    s = _order_value(s)
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (mesh.n_interior,):
        raise DimensionError(
            f"initial state has shape {y0.shape}, expected ({mesh.n_interior},)",
            module=_MODULE,
        )
    if not (penalty > 0.0) or not math.isfinite(penalty):
        raise ValueError(f"penalty must be positive, got {penalty!r}")
    target_terminal = np.asarray(target.terminal, dtype=float)
    if target_terminal.shape != (mesh.n_interior,):
        raise DimensionError(
            f"target terminal state has shape {target_terminal.shape}, "
            f"expected ({mesh.n_interior},)",
            module=_MODULE,
        )
    B = assemble_control_matrix(mesh, region)
    M = assemble_mass(mesh)
    if gap_tol is None:
        gap_tol = 1e-3 * mass_norm(M, target_terminal)
    mask = _region_mask(B)
    block = (grid.n_levels - 1, int(np.count_nonzero(mask)))

    def embed(vec: np.ndarray) -> np.ndarray:
        u = np.zeros((grid.n_levels, mesh.n_interior))
        u[1:, mask] = vec.reshape(block)
        return u

    def stage_objective(beta: float):
        def fun(vec: np.ndarray) -> tuple[float, np.ndarray]:
            value, grad = tracking_objective(
                mesh, s, grid, region, y0, target_terminal, beta, embed(vec), power
            )
            return value, grad[1:, mask].ravel()

        return fun

    def finish(u: np.ndarray, value: float, iterations: int) -> ConstrainedResult:
        y = forward_evolution(mesh, s, grid, y0, u, B)
        gap = mass_norm(M, y.terminal - target_terminal)
        return ConstrainedResult(
            controls=u,
            state=y,
            feasible=gap <= gap_tol,
            terminal_gap=gap,
            gap_tol=gap_tol,
            horizon=grid.terminal_time,
            objective=value,
            sup_norm=float(u.max(initial=0.0)),
            state_min=float(y.states.min()),
            iterations=iterations,
        )

    def run_stage(x, beta, cap, ftol):
        return minimize(
            stage_objective(beta),
            x,
            jac=True,
            method="L-BFGS-B",
            bounds=[(0.0, None)] * x.size,
            options=dict(maxiter=cap, maxfun=20 * cap, ftol=ftol, gtol=1e-16),
        )

    def gap_of(x) -> float:
        y = forward_evolution(mesh, s, grid, y0, embed(x), B)
        return mass_norm(M, y.terminal - target_terminal)

    # start from the constant admissible level on the control region
    x = np.full(block, target.level).ravel()
    betas: list[float] = []
    beta = 1e-3
    while beta > penalty:
        betas.append(beta)
        beta /= 100.0
    iterations = 0
    for beta in betas:  # warm-up stages at gentler penalties
        outcome = run_stage(x, beta, stage_iter, ftol=1e-11)
        x = np.maximum(outcome.x, 0.0)
        iterations += int(outcome.nit)

    spent = 0
    previous_gap = None
    while spent < max_iter:
        outcome = run_stage(x, penalty, stage_iter, ftol=1e-14)
        x = np.maximum(outcome.x, 0.0)
        spent += int(outcome.nit)
        iterations += int(outcome.nit)
        gap = gap_of(x)
        if gap <= 0.5 * gap_tol:
            # safely inside feasibility: the verdict cannot change anymore
            return finish(embed(x), float(outcome.fun), iterations)
        if outcome.status == 0 or int(outcome.nit) == 0:
            # the stage declared convergence or cannot move at all
            return finish(embed(x), float(outcome.fun), iterations)
        if previous_gap is not None and abs(gap - previous_gap) <= 5e-3 * gap:
            return finish(embed(x), float(outcome.fun), iterations)
        previous_gap = gap
    raise NonConvergenceError(
        f"tracking minimization spent its {max_iter}-iteration budget "
        f"without the terminal gap stabilizing (last gap {gap:.6e})",
        residual=float(gap),
        best=finish(embed(x), float(outcome.fun), iterations),
        module=_MODULE,
    )


def control_mass_concentration(
    mesh: UniformMesh1D,
    grid: TimeGrid,
    region: ControlRegion,
    controls,
    mass_fraction: float = 0.95,
) -> float:
    """Fraction of admissible control cells carrying the given mass share.

    Cell mass is the control magnitude weighted by the cell's space-time
    measure (lumped region weight x dt).  Small values mean the control
    concentrates on few cells, the hallmark of near-minimal horizons.
    """
    if not (0.0 < mass_fraction < 1.0):
        raise ValueError(f"mass fraction must lie in (0, 1), got {mass_fraction!r}")
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (grid.n_levels, mesh.n_interior):
        raise DimensionError(
            f"controls have shape {controls.shape}, expected "
            f"({grid.n_levels}, {mesh.n_interior})",
            module=_MODULE,
        )
    B = assemble_control_matrix(mesh, region)
    mask = _region_mask(B)
    weights = grid.dt * B.entries.sum(axis=1)[mask]
    cell_mass = np.abs(controls[1:, mask]) * weights[None, :]
    total = float(cell_mass.sum())
    if total == 0.0:
        return 0.0
    flat = np.sort(cell_mass.ravel())[::-1]
    covered = np.cumsum(flat)
    cells = int(np.searchsorted(covered, mass_fraction * total) + 1)
    return cells / flat.size


@dataclass(frozen=True)
class BisectionPoint:
    """One feasibility probe of the horizon bisection."""

    horizon: float
    gap: float
    gap_tol: float
    feasible: bool


@dataclass
class MinTimeResult:
    """Smallest horizon admitting a non-negative tracking control."""

    time: float
    bracket: tuple[float, float]
    trace: list[BisectionPoint]


def min_time_estimate(
    mesh: UniformMesh1D,
    s,
    y0,
    region: ControlRegion,
    initial,
    level: float,
    bracket: tuple[float, float] = (0.2, 1.2),
    width: float = 0.02,
    gap_tol: float | None = None,
    penalty: float = 1e-10,
    time_step: float = 0.01,
    power: int = SUP_NORM_POWER,
    max_iter: int = 3000,
    stage_iter: int = 600,
) -> MinTimeResult:
    """Bisect the horizon for the transition to non-negative controllability.

    Each candidate horizon gets its own time grid (step close to
    ``time_step``) and a freshly derived reference terminal state; the
    candidate is feasible when the optimized terminal gap falls below
    ``gap_tol`` (defaulting, per candidate, to ``1e-3 x`` the target
    terminal norm).  The bracket must separate: infeasible at its left
    endpoint, feasible at its right one, else :class:`BracketError`.

    Stalled inner optimizations are not fatal: the best iterate found
    decides feasibility for that candidate.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not (0.0 < lo < hi):
        raise ValueError(f"bracket must satisfy 0 < lo < hi, got {bracket!r}")
    if not (width > 0.0):
        raise ValueError(f"bracket width target must be positive, got {width!r}")
    trace: list[BisectionPoint] = []

    def probe(horizon: float) -> bool:
        n_levels = max(8, int(round(horizon / time_step)) + 1)
        grid = TimeGrid(horizon, n_levels)
        target = reference_trajectory(mesh, s, grid, region, initial, level)
        try:
            result = constrained_tracking(
                mesh,
                s,
                grid,
                y0,
                region,
                target,
                penalty=penalty,
                gap_tol=gap_tol,
                power=power,
                max_iter=max_iter,
                stage_iter=stage_iter,
            )
        except NonConvergenceError as exc:
            result = exc.best
        trace.append(
            BisectionPoint(
                horizon=horizon,
                gap=result.terminal_gap,
                gap_tol=result.gap_tol,
                feasible=result.feasible,
            )
        )
        return result.feasible

    if probe(lo):
        raise BracketError(
            f"horizon {lo} at the left bracket endpoint is already feasible",
            module=_MODULE,
        )
    if not probe(hi):
        raise BracketError(
            f"horizon {hi} at the right bracket endpoint is not feasible",
            module=_MODULE,
        )
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if probe(mid):
            hi = mid
        else:
            lo = mid
    return MinTimeResult(time=0.5 * (lo + hi), bracket=(lo, hi), trace=trace)
