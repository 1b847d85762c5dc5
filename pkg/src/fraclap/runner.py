"""Experiment pipelines: validated config in, deterministic artifacts out.

Each experiment computes everything first and only then writes its
artifacts, so a failed run leaves no partial output directory behind.
Every CSV starts with a ``# config <sha1>`` comment naming the exact
configuration that produced it, followed by the column header. Wall-clock
timings go to ``timings.txt`` only -- keeping them out of the CSVs and the
summary makes identical configurations produce identical bytes.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, profile_function
from .constrained_control import (
    constrained_tracking,
    control_mass_concentration,
    min_time_estimate,
    reference_trajectory,
)
from .exterior_control import (
    RobinParameters,
    extended_interval_mesh,
    solve_exterior_control,
    zero_extension,
)
from .fe_core import UniformMesh1D, convergence_study
from .heat_solver import ControlRegion, TimeGrid
from .hum_control import solve_hum
from .simultaneous_control import (
    COMPARISON_COLUMNS,
    comparison_cells,
    crossover_summary,
    run_comparison,
)

__all__ = ["RunResult", "Table", "run_experiment", "fit_slope"]


@dataclass(frozen=True)
class Table:
    """One CSV artifact: file name, column header, unformatted records."""

    name: str
    header: Sequence[str]
    rows: Sequence[Sequence[Any]]


@dataclass(frozen=True)
class RunResult:
    """Artifacts of one experiment run."""

    out_dir: Path
    files: tuple[Path, ...]
    summary: dict


def fit_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def _write_table(path: Path, comment: str, table: Table) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(table.header))
        for row in table.rows:
            writer.writerow([_cell(v) for v in row])


def _jsonable(value: Any) -> Any:
    """Recursively convert diagnostics to JSON-native types."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    return value


# ---------------------------------------------------------------------------
# Per-experiment pipelines. Each returns (tables, diagnostics, timings).


def _run_elliptic(config: ExperimentConfig):
    params = config.params
    rows: list[list[Any]] = []
    diagnostics: dict[str, Any] = {"orders": {}}
    timings = []
    for s in params.orders:
        start = time.perf_counter()
        study = convergence_study(s, params.widths, params.reference_refinement)
        timings.append((f"convergence_study s={s:g}", time.perf_counter() - start))
        for row in study:
            rows.append([s, row.h, row.err_l2, row.err_energy, row.rate_l2, row.rate_energy])
        diagnostics["orders"][f"{s:g}"] = {
            "energy_slope": fit_slope([r.h for r in study], [r.err_energy for r in study]),
            "l2_slope": fit_slope([r.h for r in study], [r.err_l2 for r in study]),
        }
    tables = [
        Table(
            "elliptic_convergence.csv",
            ("order", "h", "err_l2", "err_energy", "rate_l2", "rate_energy"),
            rows,
        )
    ]
    return tables, diagnostics, timings


def _run_interior(config: ExperimentConfig):
    params = config.params
    region = ControlRegion(*params.region)
    grid = TimeGrid(params.horizon, params.n_levels)
    profile = profile_function(params.profile)
    tables = []
    diagnostics: dict[str, Any] = {"orders": {}}
    timings = []
    for s in params.orders:
        rows = []
        for h in sorted(params.widths, reverse=True):
            mesh = UniformMesh1D.from_h(-1.0, 1.0, h)
            y0 = profile(mesh.interior_nodes)
            start = time.perf_counter()
            result = solve_hum(
                mesh, s, grid, y0, region, penalty=mesh.h**2, tol=params.tol
            )
            timings.append((f"solve_hum s={s:g} h={mesh.h:g}", time.perf_counter() - start))
            rows.append(
                [
                    mesh.h,
                    result.penalty,
                    result.cost,
                    result.optimal_energy,
                    result.terminal_norm,
                    result.iterations,
                ]
            )
        costs = [r[2] for r in rows]
        terminals = [r[4] for r in rows]
        diagnostics["orders"][f"{s:g}"] = {
            "cost_ratio": max(costs) / min(costs),
            "terminal_slope": fit_slope([r[0] for r in rows], terminals),
            "cost_strictly_increasing": all(b > a for a, b in zip(costs, costs[1:])),
            "terminal_strictly_decreasing": all(
                b < a for a, b in zip(terminals, terminals[1:])
            ),
        }
        tables.append(
            Table(
                f"interior_diagnostics_s{s:g}.csv",
                ("h", "beta", "cost", "energy", "terminal_norm", "iterations"),
                rows,
            )
        )
    return tables, diagnostics, timings


def _run_exterior(config: ExperimentConfig):
    params = config.params
    region = ControlRegion(*params.region)
    grid = TimeGrid(params.horizon, params.n_levels)
    robin = RobinParameters(params.robin_n, params.kappa)
    profile = profile_function(params.profile)
    tables = []
    diagnostics: dict[str, Any] = {"orders": {}}
    timings = []
    for s in params.orders:
        rows = []
        for h in sorted(params.widths, reverse=True):
            mesh = extended_interval_mesh(h)
            y0 = zero_extension(mesh, profile)
            start = time.perf_counter()
            result = solve_exterior_control(
                mesh, s, robin, grid, y0, region, penalty=mesh.h**2, tol=params.tol
            )
            timings.append(
                (f"solve_exterior_control s={s:g} h={mesh.h:g}", time.perf_counter() - start)
            )
            rows.append(
                [
                    mesh.h,
                    result.penalty,
                    result.cost,
                    result.optimal_energy,
                    result.terminal_norm,
                    result.iterations,
                    params.robin_n,
                    params.kappa,
                ]
            )
        costs = [r[2] for r in rows]
        terminals = [r[4] for r in rows]
        diagnostics["orders"][f"{s:g}"] = {
            "cost_ratio": max(costs) / min(costs),
            "terminal_slope": fit_slope([r[0] for r in rows], terminals),
            "cost_nondecreasing": all(b >= a for a, b in zip(costs, costs[1:])),
        }
        tables.append(
            Table(
                f"exterior_diagnostics_s{s:g}.csv",
                (
                    "h",
                    "beta",
                    "cost",
                    "energy",
                    "terminal_norm",
                    "iterations",
                    "robin_n",
                    "kappa",
                ),
                rows,
            )
        )
    return tables, diagnostics, timings


def _control_table(grid: TimeGrid, nodes: np.ndarray, controls: np.ndarray) -> Table:
    rows = [
        [grid.times[m], nodes[j], controls[m, j]]
        for m in range(grid.n_levels)
        for j in range(len(nodes))
    ]
    return Table("constrained_control.csv", ("t", "x", "u"), rows)


def _run_constrained(config: ExperimentConfig):
    params = config.params
    mesh = UniformMesh1D.from_h(-1.0, 1.0, params.width)
    region = ControlRegion(*params.region)
    y0 = profile_function(params.profile)(mesh.interior_nodes)
    target_initial = profile_function(params.target_profile, params.target_scale)(
        mesh.interior_nodes
    )
    tables = []
    diagnostics: dict[str, Any] = {"mode": params.mode}
    timings = []

    def levels(horizon: float) -> int:
        return max(2, round(horizon / params.time_step))

    if params.mode == "min-time":
        start = time.perf_counter()
        estimate = min_time_estimate(
            mesh,
            params.order,
            y0,
            region,
            target_initial,
            params.level,
            bracket=params.bracket,
            width=params.bisect_width,
            penalty=params.penalty,
            time_step=params.time_step,
        )
        timings.append(("min_time_estimate", time.perf_counter() - start))
        horizon = estimate.time
        tables.append(
            Table(
                "constrained_bisection.csv",
                ("horizon", "gap", "gap_tol", "feasible"),
                [
                    [p.horizon, p.gap, p.gap_tol, p.feasible]
                    for p in estimate.trace
                ],
            )
        )
        diagnostics["T_min"] = horizon
        diagnostics["bracket"] = list(estimate.bracket)
    else:
        horizon = params.horizon
        diagnostics["T_min"] = None

    grid = TimeGrid(horizon, levels(horizon))
    target = reference_trajectory(
        mesh, params.order, grid, region, target_initial, params.level
    )
    start = time.perf_counter()
    result = constrained_tracking(
        mesh,
        params.order,
        grid,
        y0,
        region,
        target,
        penalty=params.penalty,
        max_iter=params.max_iter,
        stage_iter=params.stage_iter,
    )
    timings.append((f"constrained_tracking T={horizon:g}", time.perf_counter() - start))
    tables.append(_control_table(grid, mesh.interior_nodes, result.controls))
    diagnostics.update(
        {
            "horizon": result.horizon,
            "gap": result.terminal_gap,
            "gap_tol": result.gap_tol,
            "feasible": result.feasible,
            "objective": result.objective,
            "sup_norm": result.sup_norm,
            "state_min": result.state_min,
            "iterations": result.iterations,
            "support_fraction_95": control_mass_concentration(
                mesh, grid, region, result.controls
            ),
        }
    )
    return tables, diagnostics, timings


def _run_simultaneous(config: ExperimentConfig):
    params = config.params
    mesh = UniformMesh1D.from_h(-1.0, 1.0, params.width)
    grid = TimeGrid(params.horizon, params.n_levels)
    region = ControlRegion(*params.region)
    y0 = profile_function(params.profile)(mesh.interior_nodes)
    start = time.perf_counter()
    rows = run_comparison(
        mesh,
        grid,
        region,
        y0,
        params.penalty,
        sizes=params.sizes,
        span=params.span,
        tol=params.tol,
        seed=config.seed,
        algorithms=params.algorithms,
        learning_rate=params.gd_learning_rate,
        sgd_learning_rate=params.sgd_learning_rate,
        standard_adam=params.standard_adam,
    )
    timings = [("run_comparison", time.perf_counter() - start)]
    summary = crossover_summary(rows)
    diagnostics = {
        "crossover_size": summary.crossover_size,
        "sgd_beats_gd_at_crossover": summary.sgd_beats_gd_at_crossover,
        "sgd_beats_cg_at_crossover": summary.sgd_beats_cg_at_crossover,
        "sgd_iteration_spread": summary.sgd_iteration_spread,
        "final_functionals": {
            f"{row.cardinality}": {} for row in rows
        },
    }
    for row in rows:
        diagnostics["final_functionals"][f"{row.cardinality}"][row.algorithm] = (
            row.final_functional
        )
    tables = [
        Table(
            "simultaneous_comparison.csv",
            COMPARISON_COLUMNS,
            [comparison_cells(row) for row in rows],
        )
    ]
    return tables, diagnostics, timings


_PIPELINES = {
    "elliptic": _run_elliptic,
    "interior": _run_interior,
    "exterior": _run_exterior,
    "constrained": _run_constrained,
    "simultaneous": _run_simultaneous,
}


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Run one experiment and write its artifact files.

    Returns the output directory, the files written and the summary tree;
    raises :class:`~fraclap.errors.NumericalError` subclasses on numerical
    failure (nothing is written in that case).
    """
    total_start = time.perf_counter()
    tables, diagnostics, timings = _PIPELINES[config.kind](config)
    total = time.perf_counter() - total_start

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sha = config.sha1
    comment = f"config {sha}"
    files = []
    for table in tables:
        path = out / table.name
        _write_table(path, comment, table)
        files.append(path)

    summary = {
        "kind": config.kind,
        "seed": config.seed,
        "outputs": [t.name for t in tables],
        "diagnostics": _jsonable(diagnostics),
        "provenance": {
            "build_id": f"artifact-{__version__}+{sha[:12]}",
            "config_sha1": sha,
            "config": config.raw,
        },
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files.append(summary_path)

    timings_path = out / "timings.txt"
    with open(timings_path, "w") as fh:
        for label, seconds in timings:
            fh.write(f"{label}\t{seconds:.3f} s\n")
        fh.write(f"total\t{total:.3f} s\n")
    files.append(timings_path)

    return RunResult(out_dir=out, files=tuple(files), summary=summary)
