"""One shared control for a whole family of diffusion orders.

A single distributed control, supported in a region ``w``, must steer every
member of a finite family of fractional heat equations -- identical except
for the diffusion order ``s``, drawn uniformly from a finite set ``K`` --
close to zero at the terminal time. Averaging the terminal misfit over the
family yields the strictly convex quadratic objective

    F(u) = (1/2) ||u||^2_{L2(w x (0,T))}
         + (1/(2 beta)) * (1/|K|) * sum_s ||y_s(T)||^2_{L2},

whose unique minimizer is computed by three interchangeable optimizers:

* ``gd_minimize`` -- constant-step gradient descent on ``F``;
* ``cg_minimize_simultaneous`` -- conjugate gradients on the equivalent
  linear optimality system ``(I + Lambda) u = b``, with ``Lambda`` the
  positive-semidefinite map read out of one forward/adjoint sweep pair per
  family member;
* ``sgd_adam_minimize`` -- seeded stochastic gradient descent that samples
  a single order per iteration and feeds the one-member gradient estimate
  into an Adam-style update.

Cost is measured in PDE solve pairs (one forward plus one adjoint sweep),
the hardware-independent unit: the deterministic optimizers consume ``|K|``
pairs per iteration, the stochastic one exactly one. Every run returns an
:class:`OptimizerTrace` whose accounting is exact, and ``run_comparison``
tabulates the traces over growing family sizes -- large families are where
the stochastic variant overtakes the deterministic ones.

Per-member sweeps inside one iteration are independent of each other; they
are executed and summed in the fixed order of ``ParameterSet.values`` so
results are bitwise reproducible (a parallel map with the same reduction
order would preserve that).

All gradients live in the control inner product
``<u, v> = dt * sum_m u_m^T B v_m`` and are therefore supported on the
nodes touched by the region matrix ``B``. Rows follow the convention of
:mod:`fraclap.heat_solver`: the step into level ``m`` consumes
``controls[m]``, the discrete duality identity pairs that row with the
adjoint at level ``m - 1``, and row 0 is never consumed, so it stays zero
in every gradient and iterate.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, DivergenceError, NonConvergenceError
from .fe_core import (
    NodalVector,
    SymDenseMatrix,
    UniformMesh1D,
    _order_value,
    assemble_mass,
    assemble_stiffness,
)
from .heat_solver import (
    ControlRegion,
    ImplicitEulerSystem,
    TimeGrid,
    assemble_control_matrix,
    march_backward,
    march_forward,
    mass_inner,
)

__all__ = [
    "ParameterSet",
    "OperatorCache",
    "OptimizerTrace",
    "control_inner",
    "control_norm",
    "expected_terminal_functional",
    "full_gradient",
    "stochastic_gradient",
    "gd_minimize",
    "cg_minimize_simultaneous",
    "sgd_adam_minimize",
    "ComparisonRow",
    "run_comparison",
    "CrossoverSummary",
    "crossover_summary",
    "write_comparison_csv",
    "ConditioningReport",
    "conditioning_report",
]

_MODULE = "fraclap.simultaneous_control"


@dataclass(frozen=True)
class ParameterSet:
    """Finite family of diffusion orders sampled with uniform probability.

    Orders must be distinct and lie strictly inside ``(1/2, 1)``, the range
    in which each single equation of the family can be steered to zero by a
    distributed control -- outside it no shared control can succeed either.
    """

    values: tuple[float, ...]

    def __post_init__(self):
        values = tuple(_order_value(s) for s in self.values)
        if not values:
            raise ValueError("parameter set needs at least one order")
        for s in values:
            if not (0.5 < s < 1.0):
                raise ValueError(
                    f"family orders must lie strictly inside (1/2, 1), got {s}"
                )
        if len(set(values)) != len(values):
            raise ValueError(f"family orders must be distinct, got {values}")
        object.__setattr__(self, "values", values)

    @property
    def cardinality(self) -> int:
        """Number of family members ``|K|``."""
        return len(self.values)

    @property
    def weight(self) -> float:
        """Uniform probability of each member, ``1 / |K|``."""
        return 1.0 / len(self.values)

    @classmethod
    def midpoints(cls, count: int, lo: float = 0.6, hi: float = 0.9) -> "ParameterSet":
        """Cell midpoints of a uniform split of ``(lo, hi)`` into ``count`` cells.

        Midpoints keep every order strictly inside the open interval for
        any ``count >= 1``, which an endpoint grid would not.
        """
        if int(count) != count or count < 1:
            raise ValueError(f"count must be a positive integer, got {count!r}")
        count = int(count)
        step = (hi - lo) / count
        return cls(tuple(lo + step * (k + 0.5) for k in range(count)))


@dataclass(frozen=True, eq=False)
class OperatorCache:
    """Frozen per-order steppers sharing one mesh, grid, region and mass.

    Building the cache assembles the stiffness matrix and factorizes the
    step matrix ``M + dt * A_s`` once per family member; every optimizer
    sweep afterwards costs only triangular solves. The mass and region
    matrices are shared by all members and never mutated.
    """

    mesh: UniformMesh1D
    grid: TimeGrid
    region: ControlRegion
    parameters: ParameterSet
    systems: tuple[ImplicitEulerSystem, ...]
    mass: SymDenseMatrix
    control_matrix: SymDenseMatrix
    region_mask: np.ndarray  # nodes whose basis function meets the region

    @classmethod
    def build(
        cls,
        mesh: UniformMesh1D,
        parameters: ParameterSet,
        grid: TimeGrid,
        region: ControlRegion,
    ) -> "OperatorCache":
        mass = assemble_mass(mesh)
        control_matrix = assemble_control_matrix(mesh, region)
        mask = np.abs(control_matrix.entries).sum(axis=1) > 0.0
        if not mask.any():
            raise ValueError(
                f"control region ({region.lo}, {region.hi}) does not touch any "
                "basis function of the mesh"
            )
        systems = tuple(
            ImplicitEulerSystem(mass, assemble_stiffness(mesh, s), grid.dt)
            for s in parameters.values
        )
        return cls(
            mesh=mesh,
            grid=grid,
            region=region,
            parameters=parameters,
            systems=systems,
            mass=mass,
            control_matrix=control_matrix,
            region_mask=mask,
        )

    @property
    def n_dof(self) -> int:
        return self.mesh.n_interior

    def zero_control(self) -> np.ndarray:
        """All-zero control trajectory of the conforming shape."""
        return np.zeros((self.grid.n_levels, self.n_dof))


@dataclass(frozen=True)
class OptimizerTrace:
    """Cost ledger of one optimizer run.

    ``pde_solve_count`` counts the forward/adjoint sweep pairs consumed by
    the optimizer proper and is exact by construction: ``iterations * |K|``
    for the deterministic optimizers, ``iterations`` for the stochastic
    one. Auxiliary sweeps are tallied separately so they cannot blur that
    contract: ``setup_solve_count`` holds the pairs spent assembling the
    conjugate-gradient right-hand side, ``evaluation_solve_count`` the
    forward-only sweeps spent on objective readouts (one per family member
    and readout; no adjoint is needed for a value).
    """

    algorithm: str
    iterations: int
    pde_solve_count: int
    final_functional: float
    wall_time: float
    setup_solve_count: int = 0
    evaluation_solve_count: int = 0


def _check_penalty(penalty: float) -> float:
    if not (penalty > 0.0) or not math.isfinite(penalty):
        raise ValueError(f"penalty must be positive and finite, got {penalty!r}")
    return float(penalty)


def _check_inputs(
    cache: OperatorCache, controls: np.ndarray, y0: NodalVector
) -> tuple[np.ndarray, np.ndarray]:
    controls = np.asarray(controls, dtype=float)
    expected = (cache.grid.n_levels, cache.n_dof)
    if controls.shape != expected:
        raise DimensionError(
            f"controls need shape {expected}, got {controls.shape}", module=_MODULE
        )
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (cache.n_dof,):
        raise DimensionError(
            f"initial state needs shape ({cache.n_dof},), got {y0.shape}",
            module=_MODULE,
        )
    return controls, y0


def control_inner(grid: TimeGrid, control_matrix: SymDenseMatrix, u, v) -> float:
    """Control-space inner product ``dt * sum_m u_m^T B v_m``.

    The sum runs over the consumed levels ``m >= 1``; row 0 never enters.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    weighted = u[1:] @ control_matrix.entries
    return float(grid.dt * np.sum(weighted * v[1:]))


def control_norm(grid: TimeGrid, control_matrix: SymDenseMatrix, u) -> float:
    """Control-space norm, clipped at zero against round-off."""
    return math.sqrt(max(control_inner(grid, control_matrix, u, u), 0.0))


def _mean_terminal_misfit(cache: OperatorCache, terminals: Sequence[np.ndarray]) -> float:
    """Family average of the squared terminal mass norms."""
    total = sum(mass_inner(cache.mass, t, t) for t in terminals)
    return total / cache.parameters.cardinality


def _family_terminals(
    cache: OperatorCache, controls: np.ndarray, y0: np.ndarray
) -> list[np.ndarray]:
    """Terminal states of all family members; |K| forward sweeps."""
    return [
        march_forward(system, cache.grid, y0, controls, cache.control_matrix).terminal
        for system in cache.systems
    ]


def expected_terminal_functional(
    cache: OperatorCache, controls: np.ndarray, y0: NodalVector, penalty: float
) -> float:
    """Objective value ``(1/2)||u||^2 + (1/(2 beta)) * mean_s ||y_s(T)||^2``.

    Costs one forward sweep per family member (readout only, no adjoints).
    """
    controls, y0 = _check_inputs(cache, controls, y0)
    penalty = _check_penalty(penalty)
    misfit = _mean_terminal_misfit(cache, _family_terminals(cache, controls, y0))
    control_sq = control_inner(cache.grid, cache.control_matrix, controls, controls)
    return 0.5 * control_sq + 0.5 * misfit / penalty


def _gradient_and_value(
    cache: OperatorCache, controls: np.ndarray, y0: np.ndarray, penalty: float
) -> tuple[np.ndarray, float]:
    """Objective gradient and value from one shared family sweep.

    Consumes exactly one forward/adjoint pair per family member; the value
    reuses the forward terminals, so it is free.
    """
    grid = cache.grid
    mask = cache.region_mask
    adjoint_sum = np.zeros_like(controls)
    misfit = 0.0
    for system in cache.systems:
        y = march_forward(system, grid, y0, controls, cache.control_matrix)
        misfit += mass_inner(cache.mass, y.terminal, y.terminal)
        p = march_backward(system, grid, -y.terminal)
        adjoint_sum[1:] += p.states[:-1]
    scale = 1.0 / (penalty * cache.parameters.cardinality)
    gradient = np.zeros_like(controls)
    gradient[1:, mask] = controls[1:, mask] - scale * adjoint_sum[1:, mask]
    control_sq = control_inner(grid, cache.control_matrix, controls, controls)
    value = 0.5 * control_sq + 0.5 * scale * misfit
    return gradient, value


def full_gradient(
    cache: OperatorCache, controls: np.ndarray, y0: NodalVector, penalty: float
) -> np.ndarray:
    """Exact objective gradient ``u - (1/(beta |K|)) * sum_s chi_w p_s``.

    Each ``p_s`` is the adjoint sweep seeded with the negated terminal
    state ``-y_s(T)`` of the controlled forward sweep; ``chi_w`` restricts
    to the region-touching nodes, where the control inner product can see.
    Row ``m >= 1`` of the result pairs ``controls[m]`` with the adjoint at
    level ``m - 1``; row 0 stays zero. Consumes exactly one forward/adjoint
    pair per family member.
    """
    controls, y0 = _check_inputs(cache, controls, y0)
    penalty = _check_penalty(penalty)
    gradient, _ = _gradient_and_value(cache, controls, y0, penalty)
    return gradient


def stochastic_gradient(
    cache: OperatorCache,
    controls: np.ndarray,
    y0: NodalVector,
    penalty: float,
    member: int,
) -> np.ndarray:
    """One-member gradient estimate ``u - (1/beta) * chi_w p_s``.

    ``member`` indexes ``cache.parameters.values``. Averaging the estimate
    over all members with the uniform weights reproduces
    :func:`full_gradient` exactly (a finite-sum identity), which is what
    makes the stochastic iteration unbiased. Consumes one solve pair.
    """
    controls, y0 = _check_inputs(cache, controls, y0)
    penalty = _check_penalty(penalty)
    k = cache.parameters.cardinality
    if int(member) != member or not (0 <= member < k):
        raise ValueError(f"member must be an index in [0, {k}), got {member!r}")
    system = cache.systems[int(member)]
    grid = cache.grid
    mask = cache.region_mask
    y = march_forward(system, grid, y0, controls, cache.control_matrix)
    p = march_backward(system, grid, -y.terminal)
    gradient = np.zeros_like(controls)
    gradient[1:, mask] = controls[1:, mask] - (p.states[:-1][:, mask]) / penalty
    return gradient


def gd_minimize(
    cache: OperatorCache,
    y0: NodalVector,
    penalty: float,
    learning_rate: float | None = None,
    tol: float = 1e-4,
    max_iter: int = 50_000,
) -> tuple[np.ndarray, OptimizerTrace]:
    """Constant-step gradient descent on the shared-control objective.

    The default step ``0.5 / (1 + 1/beta)`` sits safely below twice the
    inverse of the largest curvature of the quadratic: the control part of
    the Hessian contributes 1 and the penalty part at most ``sigma^2/beta``
    with ``sigma`` the norm of the averaged control-to-terminal map, which
    is below one for the dissipative evolutions handled here. Convergence
    is declared once the control-space gradient norm drops to ``tol``;
    hitting ``max_iter`` first returns the current iterate without error.

    Each iteration evaluates the gradient (one solve pair per family
    member, the value rides along for free) and then steps, so the trace
    satisfies ``pde_solve_count == iterations * |K|`` exactly. Raises
    :class:`~fraclap.errors.DivergenceError` after five consecutive
    objective increases, the signature of an unstable step size.
    """
    penalty = _check_penalty(penalty)
    if learning_rate is None:
        learning_rate = 0.5 / (1.0 + 1.0 / penalty)
    learning_rate = float(learning_rate)
    if not (learning_rate > 0.0) or not math.isfinite(learning_rate):
        raise ValueError(f"learning rate must be positive, got {learning_rate!r}")
    if int(max_iter) != max_iter or max_iter < 1:
        raise ValueError(f"max_iter must be a positive integer, got {max_iter!r}")
    controls = cache.zero_control()
    _, y0 = _check_inputs(cache, controls, y0)
    members = cache.parameters.cardinality
    start = time.perf_counter()
    previous = math.inf
    rises = 0
    value = math.nan
    evaluations = 0
    converged = False
    iterations = 0
    for iterations in range(1, int(max_iter) + 1):
        gradient, value = _gradient_and_value(cache, controls, y0, penalty)
        if value > previous:
            rises += 1
            if rises >= 5:
                raise DivergenceError(
                    f"objective rose {rises} iterations in a row (step "
                    f"{learning_rate:.3e} is too large for this problem)",
                    module=_MODULE,
                )
        else:
            rises = 0
        previous = value
        if control_norm(cache.grid, cache.control_matrix, gradient) <= tol:
            converged = True
            break
        controls = controls - learning_rate * gradient
    if not converged:
        # the loop stepped after its last readout; refresh the value at the
        # returned iterate (forward sweeps only, tallied as evaluations)
        value = expected_terminal_functional(cache, controls, y0, penalty)
        evaluations = members
    trace = OptimizerTrace(
        algorithm="gd",
        iterations=iterations,
        pde_solve_count=iterations * members,
        final_functional=value,
        wall_time=time.perf_counter() - start,
        evaluation_solve_count=evaluations,
    )
    return controls, trace


def cg_minimize_simultaneous(
    cache: OperatorCache,
    y0: NodalVector,
    penalty: float,
    tol: float = 1e-4,
    max_iter: int = 500,
) -> tuple[np.ndarray, OptimizerTrace]:
    """Conjugate gradients on the optimality system ``(I + Lambda) u = b``.

    ``Lambda u`` is the region-masked adjoint readout of the family of
    forward sweeps driven by ``u`` from a zero initial state, scaled by
    ``1/(beta |K|)``; it is symmetric positive semidefinite in the control
    inner product, in which the whole recursion is formulated. ``b``
    collects the same readout of the free evolutions of ``y0``, with
    flipped sign. The residual of this system equals the objective gradient
    with opposite sign, so the stopping rule ``||r|| <= tol`` measures
    exactly what :func:`gd_minimize` measures.

    Assembling ``b`` costs one solve pair per family member, recorded in
    ``setup_solve_count``; each iteration applies ``Lambda`` once, so the
    trace satisfies ``pde_solve_count == iterations * |K|`` exactly. The
    final objective readout adds ``|K|`` forward sweeps, tallied in
    ``evaluation_solve_count``. Exceeding ``max_iter`` raises
    :class:`~fraclap.errors.NonConvergenceError` with the last residual.
    """
    penalty = _check_penalty(penalty)
    if int(max_iter) != max_iter or max_iter < 1:
        raise ValueError(f"max_iter must be a positive integer, got {max_iter!r}")
    controls = cache.zero_control()
    _, y0 = _check_inputs(cache, controls, y0)
    grid = cache.grid
    mask = cache.region_mask
    members = cache.parameters.cardinality
    scale = 1.0 / (penalty * members)
    rest = np.zeros(cache.n_dof)
    start = time.perf_counter()

    def masked_adjoint_readout(drive: np.ndarray | None, initial: np.ndarray) -> np.ndarray:
        """Sum over the family of the adjoint sweeps seeded with the
        terminal states; one solve pair per member."""
        accumulated = np.zeros((grid.n_levels, cache.n_dof))
        for system in cache.systems:
            y = march_forward(
                system, grid, initial,
                drive, cache.control_matrix if drive is not None else None,
            )
            p = march_backward(system, grid, y.terminal)
            accumulated[1:] += p.states[:-1]
        out = np.zeros_like(accumulated)
        out[1:, mask] = scale * accumulated[1:, mask]
        return out

    def apply_operator(u: np.ndarray) -> np.ndarray:
        return u + masked_adjoint_readout(u, rest)

    b = -masked_adjoint_readout(None, y0)
    setup = members

    residual = b.copy()
    rho = control_inner(grid, cache.control_matrix, residual, residual)
    residual_norm = math.sqrt(max(rho, 0.0))
    iterations = 0
    if residual_norm > tol:
        direction = residual.copy()
        while residual_norm > tol:
            if iterations >= max_iter:
                raise NonConvergenceError(
                    f"conjugate gradients stalled at residual "
                    f"{residual_norm:.3e} after {iterations} iterations",
                    residual=residual_norm,
                    best=controls,
                    module=_MODULE,
                )
            applied = apply_operator(direction)
            curvature = control_inner(grid, cache.control_matrix, direction, applied)
            if not (curvature > 0.0):
                raise NonConvergenceError(
                    f"optimality operator lost positive definiteness "
                    f"(curvature {curvature:.3e})",
                    residual=residual_norm,
                    best=controls,
                    module=_MODULE,
                )
            step = rho / curvature
            controls = controls + step * direction
            residual = residual - step * applied
            rho_next = control_inner(grid, cache.control_matrix, residual, residual)
            direction = residual + (rho_next / rho) * direction
            rho = rho_next
            residual_norm = math.sqrt(max(rho, 0.0))
            iterations += 1

    value = expected_terminal_functional(cache, controls, y0, penalty)
    trace = OptimizerTrace(
        algorithm="cg",
        iterations=iterations,
        pde_solve_count=iterations * members,
        final_functional=value,
        wall_time=time.perf_counter() - start,
        setup_solve_count=setup,
        evaluation_solve_count=members,
    )
    return controls, trace


def sgd_adam_minimize(
    cache: OperatorCache,
    y0: NodalVector,
    penalty: float,
    *,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    tol: float = 1e-4,
    max_iter: int = 100_000,
    seed: int = 0,
    standard_adam: bool = False,
    check_every: int = 50,
    window: int = 20,
) -> tuple[np.ndarray, OptimizerTrace]:
    """Stochastic gradient descent with an Adam step, seeded and restartable.

    Each iteration draws one family member uniformly at random from a
    ``numpy.random.default_rng(seed)`` stream, computes the one-member
    gradient estimate (a single solve pair) and applies the Adam update.
    Two runs with the same seed and arguments are bitwise identical.

    The default update divides the first moment by the constant ``1 -
    beta1`` and the second by ``1 - beta2``, and decays the second moment
    with ``beta1``; this variant amounts to a fixed rescaling of the
    effective step and works well here. Pass ``standard_adam=True`` for the
    conventional scheme (second moment decayed with ``beta2``, per-step
    bias corrections ``1 - beta^k``).

    Stopping: per-iteration one-sample values are far too noisy to detect
    convergence, so every ``check_every`` iterations the full objective is
    read out on all members (forward sweeps only, tallied in
    ``evaluation_solve_count``). The run stops once the *total* objective
    gain over the last ``window`` readouts falls below
    ``tol * max(1, |F|)`` -- another window of iterations is no longer
    worth the tolerance. Hitting ``max_iter`` first returns the current
    iterate without error. Five consecutive readouts that each *rise* by
    more than twice that threshold raise
    :class:`~fraclap.errors.DivergenceError` (sustained resolvable growth;
    the fluctuations of a converged stochastic iterate stay below twice
    the threshold and never trigger it).

    The trace satisfies ``pde_solve_count == iterations`` exactly.
    """
    penalty = _check_penalty(penalty)
    if not (learning_rate > 0.0) or not math.isfinite(learning_rate):
        raise ValueError(f"learning rate must be positive, got {learning_rate!r}")
    for name, value in (("beta1", beta1), ("beta2", beta2)):
        if not (0.0 < value < 1.0):
            raise ValueError(f"{name} must lie in (0, 1), got {value!r}")
    if not (eps > 0.0):
        raise ValueError(f"eps must be positive, got {eps!r}")
    if int(check_every) != check_every or check_every < 1:
        raise ValueError(f"check_every must be a positive integer, got {check_every!r}")
    if int(window) != window or window < 1:
        raise ValueError(f"window must be a positive integer, got {window!r}")
    if int(max_iter) != max_iter or max_iter < 1:
        raise ValueError(f"max_iter must be a positive integer, got {max_iter!r}")
    controls = cache.zero_control()
    _, y0 = _check_inputs(cache, controls, y0)
    members = cache.parameters.cardinality
    rng = np.random.default_rng(seed)
    first_moment = np.zeros_like(controls)
    second_moment = np.zeros_like(controls)
    readouts: list[float] = []
    rises = 0
    evaluations = 0
    iterations = 0
    start = time.perf_counter()
    for k in range(1, int(max_iter) + 1):
        iterations = k
        member = int(rng.integers(members))
        gradient = stochastic_gradient(cache, controls, y0, penalty, member)
        first_moment = beta1 * first_moment + (1.0 - beta1) * gradient
        if standard_adam:
            second_moment = beta2 * second_moment + (1.0 - beta2) * gradient * gradient
            corrected_first = first_moment / (1.0 - beta1**k)
            corrected_second = second_moment / (1.0 - beta2**k)
        else:
            second_moment = beta1 * second_moment + (1.0 - beta1) * gradient * gradient
            corrected_first = first_moment / (1.0 - beta1)
            corrected_second = second_moment / (1.0 - beta2)
        controls = controls - learning_rate * corrected_first / (
            np.sqrt(corrected_second) + eps
        )
        if k % int(check_every) == 0:
            value = expected_terminal_functional(cache, controls, y0, penalty)
            evaluations += members
            threshold = tol * max(1.0, abs(value))
            if readouts and value > readouts[-1] + 2.0 * threshold:
                rises += 1
                if rises >= 5:
                    raise DivergenceError(
                        f"objective rose beyond the resolvable threshold on "
                        f"{rises} consecutive readouts (iteration {k})",
                        module=_MODULE,
                    )
            else:
                rises = 0
            readouts.append(value)
            if len(readouts) > int(window):
                gain = readouts[-1 - int(window)] - readouts[-1]
                if gain <= threshold:
                    break
    if readouts and iterations % int(check_every) == 0:
        final_value = readouts[-1]
    else:
        final_value = expected_terminal_functional(cache, controls, y0, penalty)
        evaluations += members
    trace = OptimizerTrace(
        algorithm="sgd",
        iterations=iterations,
        pde_solve_count=iterations,
        final_functional=final_value,
        wall_time=time.perf_counter() - start,
        evaluation_solve_count=evaluations,
    )
    return controls, trace


@dataclass(frozen=True)
class ComparisonRow:
    """One row of the family-size comparison table."""

    cardinality: int
    algorithm: str
    iterations: int
    pde_solve_count: int
    setup_solve_count: int
    evaluation_solve_count: int
    final_functional: float
    terminal_expectation: float  # mean squared terminal norm at the result
    wall_time: float


def run_comparison(
    mesh: UniformMesh1D,
    grid: TimeGrid,
    region: ControlRegion,
    y0: NodalVector,
    penalty: float,
    sizes: Sequence[int] = (2, 10, 50, 150),
    *,
    span: tuple[float, float] = (0.6, 0.9),
    tol: float = 1e-4,
    seed: int = 0,
    algorithms: Sequence[str] = ("gd", "cg", "sgd"),
    learning_rate: float | None = None,
    sgd_learning_rate: float = 1e-3,
    standard_adam: bool = False,
) -> list[ComparisonRow]:
    """Run the optimizers side by side over growing family sizes.

    For each size a fresh midpoint family on ``span`` is built and every
    requested algorithm minimizes the same objective to the same tolerance;
    ``learning_rate`` tunes the plain-gradient step while
    ``sgd_learning_rate`` feeds the stochastic optimizer.
    Each row records the trace counts plus the family-averaged squared
    terminal norm at the returned control (measured with ``|K|`` extra
    forward sweeps that are not charged to any trace). Rows come out in
    ``sizes`` x ``algorithms`` order; pass the result to
    :func:`crossover_summary` for the aggregate cost structure and to
    :func:`write_comparison_csv` for the on-disk table.
    """
    if not sizes:
        raise ValueError("need at least one family size")
    known = {"gd", "cg", "sgd"}
    for name in algorithms:
        if name not in known:
            raise ValueError(f"unknown algorithm {name!r}; pick from {sorted(known)}")
    rows: list[ComparisonRow] = []
    for size in sizes:
        parameters = ParameterSet.midpoints(int(size), *span)
        cache = OperatorCache.build(mesh, parameters, grid, region)
        for name in algorithms:
            if name == "gd":
                controls, trace = gd_minimize(
                    cache, y0, penalty, learning_rate=learning_rate, tol=tol
                )
            elif name == "cg":
                controls, trace = cg_minimize_simultaneous(cache, y0, penalty, tol=tol)
            else:
                controls, trace = sgd_adam_minimize(
                    cache, y0, penalty, learning_rate=sgd_learning_rate,
                    tol=tol, seed=seed, standard_adam=standard_adam,
                )
            expectation = _mean_terminal_misfit(
                cache, _family_terminals(cache, controls, np.asarray(y0, dtype=float))
            )
            rows.append(
                ComparisonRow(
                    cardinality=parameters.cardinality,
                    algorithm=trace.algorithm,
                    iterations=trace.iterations,
                    pde_solve_count=trace.pde_solve_count,
                    setup_solve_count=trace.setup_solve_count,
                    evaluation_solve_count=trace.evaluation_solve_count,
                    final_functional=trace.final_functional,
                    terminal_expectation=expectation,
                    wall_time=trace.wall_time,
                )
            )
    return rows


@dataclass(frozen=True)
class CrossoverSummary:
    """Aggregate cost structure of a comparison table.

    ``crossover_size`` is the largest tested family size whose
    conjugate-gradient pair count exceeds the stochastic iteration count --
    the size from which the stochastic optimizer is the cheapest; ``None``
    when no tested size reaches it. ``sgd_iteration_spread`` is the
    max/min ratio of stochastic iteration counts across sizes (flatness).
    """

    crossover_size: int | None
    sgd_beats_gd_at_crossover: bool | None
    sgd_beats_cg_at_crossover: bool | None
    sgd_iteration_spread: float | None


def crossover_summary(rows: Sequence[ComparisonRow]) -> CrossoverSummary:
    """Distill the cost crossover out of :func:`run_comparison` rows."""
    by_size: dict[int, dict[str, ComparisonRow]] = {}
    for row in rows:
        by_size.setdefault(row.cardinality, {})[row.algorithm] = row
    sgd_counts = [
        cell["sgd"].iterations for cell in by_size.values() if "sgd" in cell
    ]
    spread = (
        max(sgd_counts) / min(sgd_counts) if sgd_counts and min(sgd_counts) > 0
        else None
    )
    crossover = None
    beats_gd = beats_cg = None
    for size in sorted(by_size):
        cell = by_size[size]
        if "cg" not in cell or "sgd" not in cell:
            continue
        if cell["cg"].pde_solve_count > cell["sgd"].iterations:
            crossover = size
            sgd_pairs = cell["sgd"].pde_solve_count
            beats_cg = sgd_pairs < cell["cg"].pde_solve_count
            beats_gd = (
                sgd_pairs < cell["gd"].pde_solve_count if "gd" in cell else None
            )
    return CrossoverSummary(
        crossover_size=crossover,
        sgd_beats_gd_at_crossover=beats_gd,
        sgd_beats_cg_at_crossover=beats_cg,
        sgd_iteration_spread=spread,
    )


COMPARISON_COLUMNS = (
    "cardinality",
    "algorithm",
    "iterations",
    "pde_solves",
    "setup_solves",
    "evaluation_solves",
    "final_functional",
    "terminal_expectation",
)


def comparison_cells(row: ComparisonRow) -> list:
    """One CSV record in :data:`COMPARISON_COLUMNS` order (no wall time)."""
    return [
        row.cardinality,
        row.algorithm,
        row.iterations,
        row.pde_solve_count,
        row.setup_solve_count,
        row.evaluation_solve_count,
        row.final_functional,
        row.terminal_expectation,
    ]


def write_comparison_csv(rows: Sequence[ComparisonRow], path) -> None:
    """Serialize comparison rows; wall times are deliberately left out so
    identical runs produce identical bytes (timings belong in a side file)."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(COMPARISON_COLUMNS))
        for row in rows:
            cells = comparison_cells(row)
            writer.writerow(
                [f"{c:.17g}" if isinstance(c, float) else c for c in cells]
            )


@dataclass(frozen=True)
class ConditioningReport:
    """Estimated spectral extremes of the optimality operator ``I + Lambda``.

    ``gd_rate`` and ``cg_rate`` are the idealized per-iteration error decay
    exponents ``ln((r + 1)/(r - 1))`` and ``ln((sqrt(r) + 1)/(sqrt(r) - 1))``
    implied by the conditioning ``r``; both shrink to zero as conditioning
    deteriorates, which is why the observed iteration counts matter more
    than these idealized rates. Diagnostic output only -- nothing asserts
    against it.
    """

    largest: float
    smallest: float
    conditioning: float
    gd_rate: float
    cg_rate: float
    power_iterations: int


def conditioning_report(
    cache: OperatorCache,
    penalty: float,
    power_iterations: int = 30,
    seed: int = 0,
) -> ConditioningReport:
    """Power-iteration estimates of the extreme eigenvalues of ``I + Lambda``.

    The largest eigenvalue comes from plain power iteration in the control
    inner product; the smallest from power iteration on the spectrum
    reflected about that estimate. Costs ``2 * power_iterations * |K|``
    solve pairs; purely diagnostic.
    """
    penalty = _check_penalty(penalty)
    if int(power_iterations) != power_iterations or power_iterations < 1:
        raise ValueError(
            f"power_iterations must be a positive integer, got {power_iterations!r}"
        )
    grid = cache.grid
    mask = cache.region_mask
    members = cache.parameters.cardinality
    scale = 1.0 / (penalty * members)
    rest = np.zeros(cache.n_dof)

    def apply_operator(u: np.ndarray) -> np.ndarray:
        accumulated = np.zeros_like(u)
        for system in cache.systems:
            z = march_forward(system, grid, rest, u, cache.control_matrix)
            p = march_backward(system, grid, z.terminal)
            accumulated[1:] += p.states[:-1]
        out = u.copy()
        out[1:, mask] += scale * accumulated[1:, mask]
        return out

    rng = np.random.default_rng(seed)

    def normalized_random() -> np.ndarray:
        x = np.zeros((grid.n_levels, cache.n_dof))
        x[1:, mask] = rng.standard_normal((grid.n_levels - 1, int(mask.sum())))
        return x / control_norm(grid, cache.control_matrix, x)

    def extreme(transform) -> float:
        x = normalized_random()
        rayleigh = math.nan
        for _ in range(int(power_iterations)):
            y = transform(x)
            rayleigh = control_inner(grid, cache.control_matrix, x, y)
            norm = control_norm(grid, cache.control_matrix, y)
            if norm == 0.0:
                break
            x = y / norm
        return rayleigh

    largest = extreme(apply_operator)
    smallest = largest - extreme(lambda u: largest * u - apply_operator(u))
    conditioning = largest / smallest if smallest > 0.0 else math.inf
    if conditioning > 1.0 and math.isfinite(conditioning):
        gd_rate = math.log((conditioning + 1.0) / (conditioning - 1.0))
        root = math.sqrt(conditioning)
        cg_rate = math.log((root + 1.0) / (root - 1.0))
    else:
        gd_rate = math.inf
        cg_rate = math.inf
    return ConditioningReport(
        largest=largest,
        smallest=smallest,
        conditioning=conditioning,
        gd_rate=gd_rate,
        cg_rate=cg_rate,
        power_iterations=int(power_iterations),
    )
