"""Tests for the collar-coupled (exterior data) control machinery."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fraclap.errors import DimensionError, MeshAlignmentError
from fraclap.exterior_control import (
    ExteriorControlResult,
    RobinParameters,
    assemble_collar_mass,
    assemble_exterior_control_matrix,
    assemble_interaction_operator,
    assemble_interior_mass,
    extended_interval_mesh,
    exterior_adjoint,
    exterior_forward,
    exterior_functional_and_gradient,
    exterior_penalty_study,
    exterior_system,
    interior_indices,
    nonlocal_normal_derivative,
    restrict_to_interior,
    robin_consistency_study,
    solve_exterior_control,
    zero_extension,
)
from fraclap.fe_core import UniformMesh1D, assemble_stiffness
from fraclap.heat_solver import (
    ControlRegion,
    TimeGrid,
    forward_evolution,
    mass_inner,
    mass_norm,
)
from oracles import exterior_flux_oracle, through_domain_matrix_oracle

PATCH = ControlRegion(1.7, 1.9)


# ---------------------------------------------------------------------------
# meshes and layout
# ---------------------------------------------------------------------------


def test_extended_mesh_places_interface_nodes():
    mesh = extended_interval_mesh(0.25)
    assert (mesh.a, mesh.b) == (-2.0, 2.0)
    xs = mesh.interior_nodes
    assert np.isclose(xs, -1.0).any() and np.isclose(xs, 1.0).any()


def test_extended_mesh_rejects_misaligned_width():
    # 0.4 divides (-1.5, 1.5) into 7.5 elements: not a mesh at all
    with pytest.raises(MeshAlignmentError):
        extended_interval_mesh(0.4, interval=(-1.5, 1.5))
    # 0.375 gives a valid mesh on (-1.5, 1.5) but no node at +-1
    with pytest.raises(MeshAlignmentError):
        extended_interval_mesh(0.375, interval=(-1.5, 1.5))


def test_extended_mesh_requires_exterior_nodes():
    with pytest.raises(MeshAlignmentError):
        extended_interval_mesh(0.25, interval=(-1.0, 1.0))


def test_robin_parameters_validation():
    with pytest.raises(ValueError):
        RobinParameters(0.5)
    with pytest.raises(ValueError):
        RobinParameters(1e9, kappa=-1.0)
    assert RobinParameters(1e4, kappa=0.0).scale == 0.0
    assert RobinParameters(1e4, kappa=2.0).scale == 2e4


def test_interior_indices_and_zero_extension():
    mesh = extended_interval_mesh(0.25)
    idx = interior_indices(mesh)
    assert np.all(np.abs(mesh.interior_nodes[idx]) < 1.0)
    assert len(idx) == 7  # nodes -0.75 .. 0.75
    y0 = zero_extension(mesh, lambda x: x + 2.0)
    xs = mesh.interior_nodes
    outside = np.abs(xs) > 1.0 + 1e-12
    assert np.all(y0[outside] == 0.0)
    assert np.allclose(y0[~outside], xs[~outside] + 2.0)


# ---------------------------------------------------------------------------
# interaction operator
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("s", [0.25, 0.75])
def test_interaction_matches_independent_reduction(s):
    """Whole-line bands minus the uniform both-points-outside correction.

    The reference reduction shares no case analysis with the assembly; the
    whole-line bands it starts from are themselves validated elsewhere
    against adaptive quadrature of the defining double integral.
    """
    mesh = extended_interval_mesh(0.5)
    F = assemble_interaction_operator(mesh, s).entries
    A = assemble_stiffness(mesh, s).entries
    ref = through_domain_matrix_oracle(mesh, s, A)
    scale = np.abs(F).max()
    assert np.abs(F - ref).max() <= 1e-10 * scale


def test_interaction_matches_independent_reduction_finer():
    s = 0.6
    mesh = extended_interval_mesh(0.25)
    F = assemble_interaction_operator(mesh, s).entries
    A = assemble_stiffness(mesh, s).entries
    ref = through_domain_matrix_oracle(mesh, s, A)
    scale = np.abs(F).max()
    assert np.abs(F - ref).max() <= 1e-10 * scale


def test_interior_pairs_keep_whole_line_bands():
    mesh = extended_interval_mesh(0.25)
    s = 0.6
    F = assemble_interaction_operator(mesh, s).entries
    A = assemble_stiffness(mesh, s).entries
    xs = mesh.interior_nodes
    strict = np.nonzero(np.abs(xs) <= 1.0 - 0.25 + 1e-12)[0]
    # rows whose hat is supported inside [-1, 1] are untouched entirely
    for i in strict:
        np.testing.assert_array_equal(F[i, :], A[i, :])


def test_disconnected_exterior_pairs_vanish():
    mesh = extended_interval_mesh(0.125)
    F = assemble_interaction_operator(mesh, 0.6).entries
    xs = mesh.interior_nodes
    right = np.nonzero(xs > 1.0 + 1e-12)[0]
    left = np.nonzero(xs < -1.0 - 1e-12)[0]
    # same side, supports at least one element apart: exactly zero
    for a in right:
        for b in right:
            if abs(a - b) >= 2:
                assert F[a, b] == 0.0
    # opposite sides, both outside: exactly zero
    for a in left:
        for b in right:
            assert F[a, b] == 0.0


def test_interaction_symmetric_positive_definite():
    mesh = extended_interval_mesh(0.125)
    for s in (0.3, 0.8):
        F = assemble_interaction_operator(mesh, s).entries
        np.testing.assert_array_equal(F, F.T)
        np.linalg.cholesky(F)  # raises LinAlgError if not SPD


def test_kappa_zero_degenerates_to_pure_interaction():
    mesh = extended_interval_mesh(0.25)
    grid = TimeGrid(0.3, 7)
    robin = RobinParameters(1e9, kappa=0.0)
    system = exterior_system(mesh, 0.6, robin, grid)
    F = assemble_interaction_operator(mesh, 0.6).entries
    Min = assemble_interior_mass(mesh).entries
    np.testing.assert_array_equal(system.operator, F)
    np.testing.assert_array_equal(system.mass, Min)


def test_collar_mass_covers_both_sides():
    mesh = extended_interval_mesh(0.25)
    K = assemble_collar_mass(mesh).entries
    xs = mesh.interior_nodes
    inside = np.abs(xs) < 1.0 - 1e-12
    # strictly interior hats never touch the collar
    assert np.all(K[np.ix_(inside, inside)] == 0.0)
    # hats partition unity on the collar except in the outermost element,
    # where the missing endpoint hat leaves a 2h/3 deficit per side
    h = mesh.h
    assert K.sum() == pytest.approx(2.0 - 4.0 * h / 3.0, rel=1e-9)


def test_control_patch_must_sit_in_one_collar():
    mesh = extended_interval_mesh(0.125)
    for bad in (ControlRegion(0.5, 1.2), ControlRegion(-1.2, 1.8)):
        with pytest.raises(ValueError):
            assemble_exterior_control_matrix(mesh, bad)
    # away from the outermost element the hats sum to one on the patch,
    # so the total weight recovers the patch length exactly
    left = assemble_exterior_control_matrix(mesh, ControlRegion(-1.75, -1.25))
    right = assemble_exterior_control_matrix(mesh, ControlRegion(1.25, 1.75))
    assert left.entries.sum() == pytest.approx(0.5, rel=1e-9)
    assert right.entries.sum() == pytest.approx(0.5, rel=1e-9)
    assemble_exterior_control_matrix(mesh, PATCH)  # unaligned ends accepted


# ---------------------------------------------------------------------------
# evolution
# ---------------------------------------------------------------------------


def test_free_run_with_zero_data_stays_zero():
    mesh = extended_interval_mesh(0.25)
    grid = TimeGrid(0.3, 6)
    traj = exterior_forward(
        mesh, 0.7, RobinParameters(1e9), grid, np.zeros(mesh.n_interior)
    )
    assert np.all(traj.states == 0.0)


def test_forward_requires_matching_control_arguments():
    mesh = extended_interval_mesh(0.25)
    grid = TimeGrid(0.3, 6)
    y0 = zero_extension(mesh, lambda x: 1.0 - x * x)
    with pytest.raises(ValueError):
        exterior_forward(
            mesh,
            0.7,
            RobinParameters(1e9),
            grid,
            y0,
            controls=np.zeros((6, mesh.n_interior)),
        )
    with pytest.raises(ValueError):
        exterior_forward(mesh, 0.7, RobinParameters(1e9), grid, y0, region=PATCH)


def test_interior_dissipates_in_mass_norm():
    mesh = extended_interval_mesh(1.0 / 8)
    grid = TimeGrid(0.3, 10)
    y0 = zero_extension(mesh, lambda x: np.cos(np.pi * x / 2))
    traj = exterior_forward(mesh, 0.6, RobinParameters(1e9), grid, y0)
    Min = assemble_interior_mass(mesh)
    norms = [mass_norm(Min, state) for state in traj.states]
    assert all(b < a for a, b in zip(norms[:-1], norms[1:]))


def test_pinned_collar_limit_matches_interior_evolution():
    """At huge flux strength the interior dynamics is the pinned-boundary one."""
    h = 1.0 / 16
    mesh = extended_interval_mesh(h)
    grid = TimeGrid(0.3, 40)
    profile = lambda x: np.cos(np.pi * x / 2)
    y0 = zero_extension(mesh, profile)
    robin = exterior_forward(mesh, 0.6, RobinParameters(1e9), grid, y0)
    restricted = restrict_to_interior(mesh, robin)

    inner_mesh = UniformMesh1D.from_h(-1.0, 1.0, h)
    y0_inner = np.array([profile(x) for x in inner_mesh.interior_nodes])
    pinned = forward_evolution(inner_mesh, 0.6, grid, y0_inner)

    from fraclap.fe_core import assemble_mass

    M = assemble_mass(inner_mesh)
    diff = mass_norm(M, restricted.terminal - pinned.terminal)
    scale = mass_norm(M, pinned.terminal)
    assert diff <= 1e-6 * scale


def test_relaxation_distance_halves_with_flux_strength():
    study = robin_consistency_study(
        1.0 / 16, 0.6, horizon=0.3, n_levels=30, initial_profile=lambda x: np.cos(np.pi * x / 2)
    )
    low = study[2e2] / study[1e2]
    high = study[2e4] / study[1e4]
    assert 0.35 <= low <= 0.65
    assert 0.35 <= high <= 0.65
    # and the distances themselves shrink with strength
    assert study[1e4] < study[1e2]


def test_forward_adjoint_transpose_duality():
    mesh = extended_interval_mesh(1.0 / 16)
    grid = TimeGrid(0.25, 12)
    robin = RobinParameters(1e9)
    Min = assemble_interior_mass(mesh)
    rng = np.random.default_rng(7)
    idx = interior_indices(mesh)
    for _ in range(5):
        y0 = np.zeros(mesh.n_interior)
        pT = np.zeros(mesh.n_interior)
        y0[idx] = rng.standard_normal(idx.size)
        pT[idx] = rng.standard_normal(idx.size)
        y = exterior_forward(mesh, 0.75, robin, grid, y0)
        p = exterior_adjoint(mesh, 0.75, robin, grid, pT)
        lhs = mass_inner(Min, y.terminal, pT)
        rhs = mass_inner(Min, y0, p.states[0])
        assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), abs(rhs))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def test_gradient_matches_finite_differences():
    mesh = extended_interval_mesh(1.0 / 16)
    grid = TimeGrid(0.3, 12)
    robin = RobinParameters(1e9)
    y0 = zero_extension(mesh, lambda x: np.cos(np.pi * x / 2))
    penalty = 1e-2
    rng = np.random.default_rng(3)
    G = assemble_exterior_control_matrix(mesh, PATCH).entries
    mask = np.abs(G).sum(axis=0) > 0.0
    base = np.zeros((grid.n_levels, mesh.n_interior))
    base[1:, mask] = rng.standard_normal((grid.n_levels - 1, int(mask.sum())))
    value, grad = exterior_functional_and_gradient(
        mesh, 0.8, robin, grid, y0, PATCH, penalty, base
    )
    eps = 1e-3
    for _ in range(3):
        d = np.zeros_like(base)
        d[1:, mask] = rng.standard_normal((grid.n_levels - 1, int(mask.sum())))
        vp, _ = exterior_functional_and_gradient(
            mesh, 0.8, robin, grid, y0, PATCH, penalty, base + eps * d
        )
        vm, _ = exterior_functional_and_gradient(
            mesh, 0.8, robin, grid, y0, PATCH, penalty, base - eps * d
        )
        fd = (vp - vm) / (2.0 * eps)
        an = float(np.sum(grad * d))
        assert abs(fd - an) <= 1e-6 * max(abs(fd), abs(an))


def test_gradient_vanishes_outside_patch():
    mesh = extended_interval_mesh(1.0 / 16)
    grid = TimeGrid(0.3, 8)
    robin = RobinParameters(1e9)
    y0 = zero_extension(mesh, lambda x: np.cos(np.pi * x / 2))
    controls = np.zeros((grid.n_levels, mesh.n_interior))
    _, grad = exterior_functional_and_gradient(
        mesh, 0.8, robin, grid, y0, PATCH, 1e-2, controls
    )
    G = assemble_exterior_control_matrix(mesh, PATCH).entries
    mask = np.abs(G).sum(axis=0) > 0.0
    assert np.all(grad[:, ~mask] == 0.0)
    assert np.any(grad[1:, mask] != 0.0)


def test_zero_initial_state_needs_no_control():
    mesh = extended_interval_mesh(1.0 / 8)
    grid = TimeGrid(0.4, 10)
    res = solve_exterior_control(
        mesh, 0.8, RobinParameters(1e9), grid, np.zeros(mesh.n_interior), PATCH
    )
    assert res.iterations == 0
    assert np.all(res.controls == 0.0)
    assert res.cost == 0.0
    assert res.terminal_norm == 0.0


def test_optimal_data_supported_on_patch_and_stationary():
    mesh = extended_interval_mesh(1.0 / 16)
    grid = TimeGrid(0.4, 20)
    robin = RobinParameters(1e9)
    y0 = zero_extension(mesh, lambda x: np.cos(np.pi * x / 2))
    penalty = mesh.h**2
    res = solve_exterior_control(
        mesh, 0.8, robin, grid, y0, PATCH, penalty=penalty, tol=1e-10
    )
    G = assemble_exterior_control_matrix(mesh, PATCH).entries
    mask = np.abs(G).sum(axis=0) > 0.0
    assert np.all(res.controls[:, ~mask] == 0.0)
    assert np.all(res.controls[0] == 0.0)  # departure level carries no data

    # the returned point is a true stationary point of the functional
    free_value, grad0 = exterior_functional_and_gradient(
        mesh, 0.8, robin, grid, y0, PATCH, penalty, np.zeros_like(res.controls)
    )
    value, grad = exterior_functional_and_gradient(
        mesh, 0.8, robin, grid, y0, PATCH, penalty, res.controls
    )
    assert np.linalg.norm(grad) <= 1e-8 * np.linalg.norm(grad0)
    assert value < free_value
    assert res.optimal_energy == pytest.approx(value, rel=1e-12)
    # consistency of the reported diagnostics
    Min = assemble_interior_mass(mesh)
    assert res.terminal_norm == pytest.approx(
        mass_norm(Min, res.state.terminal), rel=1e-12
    )


def test_controlled_terminal_beats_free_terminal():
    mesh = extended_interval_mesh(1.0 / 16)
    grid = TimeGrid(0.4, 20)
    robin = RobinParameters(1e9)
    y0 = zero_extension(mesh, lambda x: np.cos(np.pi * x / 2))
    res = solve_exterior_control(
        mesh, 0.8, robin, grid, y0, PATCH, penalty=mesh.h**2
    )
    free = exterior_forward(mesh, 0.8, robin, grid, y0)
    Min = assemble_interior_mass(mesh)
    assert res.terminal_norm < mass_norm(Min, free.terminal)


def test_penalty_study_weak_order_grows_cost():
    """Below order 1/2 the data cost rises while the terminal norm falls."""
    rows = exterior_penalty_study(
        0.2,
        [1.0 / 8, 1.0 / 16, 1.0 / 32],
        PATCH,
        horizon=0.4,
        n_levels=30,
        initial_profile=lambda x: np.cos(np.pi * x / 2),
    )
    assert [row.h for row in rows] == [1.0 / 8, 1.0 / 16, 1.0 / 32]
    for row in rows:
        assert row.penalty == pytest.approx(row.h**2)
    costs = [row.cost for row in rows]
    terminals = [row.terminal_norm for row in rows]
    assert all(b >= a for a, b in zip(costs[:-1], costs[1:]))
    assert all(b < a for a, b in zip(terminals[:-1], terminals[1:]))


# ---------------------------------------------------------------------------
# nonlocal flux (normal-derivative analogue)
# ---------------------------------------------------------------------------


def test_flux_of_globally_constant_function_vanishes():
    mesh = UniformMesh1D.from_h(-1.0, 1.0, 0.25)
    u = np.ones(mesh.n_interior + 2)
    vals = nonlocal_normal_derivative(
        mesh, u, 0.6, [1.05, 1.5, 2.0, -3.0], exterior_values=1.0
    )
    assert np.abs(vals).max() <= 1e-12


def test_flux_matches_adaptive_quadrature():
    mesh = UniformMesh1D.from_h(-1.0, 1.0, 0.125)
    rng = np.random.default_rng(11)
    u = rng.standard_normal(mesh.n_interior)
    full = np.concatenate([[0.0], u, [0.0]])
    for s in (0.3, 0.75):
        for point in (1.04, 1.6, 2.9, -1.2):
            got = nonlocal_normal_derivative(mesh, u, s, point)[0]
            want = exterior_flux_oracle(mesh, full, s, point)
            assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_flux_even_symmetry():
    mesh = UniformMesh1D.from_h(-1.0, 1.0, 0.125)
    xs = mesh.interior_nodes
    u = np.cos(np.pi * xs / 2) + xs**2
    pts = np.array([1.07, 1.3, 2.2])
    right = nonlocal_normal_derivative(mesh, u, 0.7, pts)
    left = nonlocal_normal_derivative(mesh, u, 0.7, -pts)
    np.testing.assert_allclose(right, left, rtol=1e-13)


def test_flux_of_nonnegative_bump_is_negative_outside():
    mesh = UniformMesh1D.from_h(-1.0, 1.0, 0.25)
    u = np.array(
        [max(0.0, 1.0 - abs(x) / 0.5) for x in mesh.interior_nodes]
    )
    vals = nonlocal_normal_derivative(mesh, u, 0.6, [1.1, 1.9, -1.4])
    assert np.all(vals < 0.0)


def test_flux_rejects_points_inside():
    mesh = UniformMesh1D.from_h(-1.0, 1.0, 0.25)
    u = np.zeros(mesh.n_interior)
    with pytest.raises(ValueError):
        nonlocal_normal_derivative(mesh, u, 0.6, [0.5])
    with pytest.raises(ValueError):
        nonlocal_normal_derivative(mesh, u, 0.6, [1.0])


def test_flux_rejects_bad_shapes():
    mesh = UniformMesh1D.from_h(-1.0, 1.0, 0.25)
    with pytest.raises(DimensionError):
        nonlocal_normal_derivative(mesh, np.zeros(3), 0.6, [1.5])


@given(st.floats(0.1, 0.9), st.floats(1.05, 3.0))
def test_flux_is_linear_in_the_data(s, point):
    mesh = UniformMesh1D.from_h(-1.0, 1.0, 0.5)
    xs = mesh.interior_nodes
    u = 1.0 - xs**2
    v = np.cos(xs)
    a, b = 0.7, -1.3
    lhs = nonlocal_normal_derivative(mesh, a * u + b * v, s, point)[0]
    rhs = a * nonlocal_normal_derivative(mesh, u, s, point)[0]
    rhs += b * nonlocal_normal_derivative(mesh, v, s, point)[0]
    assert abs(lhs - rhs) <= 1e-11 * max(1.0, abs(lhs))
