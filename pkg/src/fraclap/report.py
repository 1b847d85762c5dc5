"""Render figures from a completed experiment directory.

The run subcommands emit plot-ready CSVs; this module turns them into PNG
files written alongside the data. Rendering is read-only with respect to
the run artifacts and can be repeated at any time.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")  # headless backend; must be selected before pyplot
import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError

__all__ = ["render_report"]


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        records = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    if not records:
        raise ConfigError(f"{path} holds no records")
    return records[0], records[1:]


def _columns(path: Path, names: tuple[str, ...]) -> dict[str, np.ndarray]:
    header, rows = _read_csv(path)
    missing = [name for name in names if name not in header]
    if missing:
        raise ConfigError(f"{path} lacks expected columns {missing}")
    index = {name: header.index(name) for name in names}
    out = {}
    for name in names:
        cells = [row[index[name]] for row in rows]
        try:
            out[name] = np.array([float(c) for c in cells])
        except ValueError:
            out[name] = np.array(cells)
    return out


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _render_elliptic(run: Path) -> list[Path]:
    data = _columns(
        run / "elliptic_convergence.csv", ("order", "h", "err_l2", "err_energy")
    )
    fig, (ax_energy, ax_l2) = plt.subplots(1, 2, figsize=(9, 4))
    for s in np.unique(data["order"]):
        pick = data["order"] == s
        ax_energy.loglog(data["h"][pick], data["err_energy"][pick], "o-", label=f"s={s:g}")
        ax_l2.loglog(data["h"][pick], data["err_l2"][pick], "o-", label=f"s={s:g}")
    ax_energy.set(xlabel="h", ylabel="energy error", title="Energy-norm convergence")
    ax_l2.set(xlabel="h", ylabel="L2 error", title="L2 convergence")
    for ax in (ax_energy, ax_l2):
        ax.legend()
        ax.grid(True, which="both", alpha=0.3)
    return [_save(fig, run / "elliptic_convergence.png")]


def _render_sweep(run: Path, pattern: str, stem: str, title: str) -> list[Path]:
    paths = sorted(run.glob(pattern))
    if not paths:
        raise ConfigError(f"no {pattern} files in {run}")
    fig, (ax_cost, ax_term) = plt.subplots(1, 2, figsize=(9, 4))
    for path in paths:
        label = path.stem.split("_s")[-1]
        data = _columns(path, ("h", "cost", "terminal_norm"))
        ax_cost.loglog(data["h"], data["cost"], "o-", label=f"s={label}")
        ax_term.loglog(data["h"], data["terminal_norm"], "o-", label=f"s={label}")
    ax_cost.set(xlabel="h", ylabel="control cost", title=f"{title}: cost")
    ax_term.set(xlabel="h", ylabel="terminal norm", title=f"{title}: terminal norm")
    for ax in (ax_cost, ax_term):
        ax.legend()
        ax.grid(True, which="both", alpha=0.3)
    return [_save(fig, run / f"{stem}.png")]


def _render_interior(run: Path) -> list[Path]:
    return _render_sweep(
        run, "interior_diagnostics_s*.csv", "interior_diagnostics", "Interior control"
    )


def _render_exterior(run: Path) -> list[Path]:
    return _render_sweep(
        run, "exterior_diagnostics_s*.csv", "exterior_diagnostics", "Exterior control"
    )


def _render_constrained(run: Path) -> list[Path]:
    data = _columns(run / "constrained_control.csv", ("t", "x", "u"))
    times = np.unique(data["t"])
    nodes = np.unique(data["x"])
    field = np.full((len(times), len(nodes)), np.nan)
    row = np.searchsorted(times, data["t"])
    col = np.searchsorted(nodes, data["x"])
    field[row, col] = data["u"]
    fig, ax = plt.subplots(figsize=(6, 4))
    mesh = ax.pcolormesh(nodes, times, field, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="control amplitude")
    ax.set(xlabel="x", ylabel="t", title="Non-negative tracking control")
    out = [_save(fig, run / "constrained_control.png")]

    bisection = run / "constrained_bisection.csv"
    if bisection.exists():
        probes = _columns(bisection, ("horizon", "gap", "gap_tol"))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.semilogy(probes["horizon"], probes["gap"], "o", label="terminal gap")
        ax.semilogy(probes["horizon"], probes["gap_tol"], "k--", label="feasibility threshold")
        ax.set(xlabel="horizon", ylabel="terminal gap", title="Minimal-horizon bisection")
        ax.legend()
        ax.grid(True, which="both", alpha=0.3)
        out.append(_save(fig, run / "constrained_bisection.png"))
    return out


def _render_simultaneous(run: Path) -> list[Path]:
    data = _columns(
        run / "simultaneous_comparison.csv",
        ("cardinality", "algorithm", "iterations", "pde_solves"),
    )
    fig, (ax_iter, ax_pairs) = plt.subplots(1, 2, figsize=(9, 4))
    for algorithm in np.unique(data["algorithm"]):
        pick = data["algorithm"] == algorithm
        sizes = data["cardinality"][pick]
        order = np.argsort(sizes)
        ax_iter.loglog(
            sizes[order], data["iterations"][pick][order], "o-", label=str(algorithm)
        )
        ax_pairs.loglog(
            sizes[order], data["pde_solves"][pick][order], "o-", label=str(algorithm)
        )
    ax_iter.set(xlabel="family size |K|", ylabel="iterations", title="Iterations")
    ax_pairs.set(xlabel="family size |K|", ylabel="solve pairs", title="Equation solves")
    for ax in (ax_iter, ax_pairs):
        ax.legend()
        ax.grid(True, which="both", alpha=0.3)
    return [_save(fig, run / "simultaneous_comparison.png")]


_RENDERERS = {
    "elliptic": _render_elliptic,
    "interior": _render_interior,
    "exterior": _render_exterior,
    "constrained": _render_constrained,
    "simultaneous": _render_simultaneous,
}


def render_report(run_dir) -> list[Path]:
    """Render the figures of one completed run; returns the PNG paths."""
    run = Path(run_dir)
    summary_path = run / "summary.json"
    if not summary_path.exists():
        raise ConfigError(f"{run} is not a finished run directory (no summary.json)")
    try:
        summary = json.loads(summary_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"unreadable summary.json in {run}: {exc}") from exc
    kind = summary.get("kind")
    renderer = _RENDERERS.get(kind)
    if renderer is None:
        raise ConfigError(f"summary.json in {run} names unknown experiment kind {kind!r}")
    return renderer(run)
