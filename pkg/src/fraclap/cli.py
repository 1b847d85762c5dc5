"""Command-line interface: configured experiment runs and bundled defaults.

``fraclap <subcommand> --config <path> [--out <dir>] [--seed <n>]`` runs one
experiment per invocation and writes plot-ready CSVs, a summary JSON and a
timing side file. ``fraclap defaults`` emits the ready-made configuration
files; ``fraclap report --run <dir>`` renders figures from a completed run.

Exit codes: 0 on success, 2 on configuration problems, 3 on numerical
failures (the message names the failing module).
"""
from __future__ import annotations

import argparse
import sys

from .config import config_from_tree, load_tree, write_bundled_defaults
from .errors import ConfigError, NumericalError

_RUN_KINDS = {
    "elliptic-convergence": "elliptic",
    "interior-control": "interior",
    "exterior-control": "exterior",
    "constrained": "constrained",
    "simultaneous": "simultaneous",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fraclap",
        description=(
            "Finite element experiments for the one-dimensional integral "
            "fractional Laplacian: elliptic convergence and penalized "
            "controllability studies."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    helps = {
        "elliptic-convergence": "uniform-load convergence study of the stationary problem",
        "interior-control": "interior null-control mesh sweep (solvable/degenerate dichotomy)",
        "exterior-control": "exterior Robin-approximated control mesh sweep",
        "constrained": "non-negative tracking control at a fixed or minimal horizon",
        "simultaneous": "optimizer comparison for shared controls of order families",
    }
    for command, kind in _RUN_KINDS.items():
        p = sub.add_parser(command, help=helps[command])
        p.add_argument("--config", required=True, help="YAML experiment configuration")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
        if kind == "constrained":
            mode = p.add_mutually_exclusive_group()
            mode.add_argument(
                "--T", type=float, default=None, metavar="HORIZON",
                help="fixed time horizon (overrides config)",
            )
            mode.add_argument(
                "--min-time", action="store_true",
                help="bisect for the smallest feasible horizon",
            )
        if kind == "simultaneous":
            p.add_argument(
                "--sizes", default=None, metavar="N1,N2,...",
                help="comma-separated family sizes (overrides config)",
            )
            p.add_argument(
                "--algo", choices=("gd", "cg", "sgd", "all"), default=None,
                help="restrict to one optimizer (overrides config)",
            )
            p.add_argument(
                "--adam-standard", action="store_true",
                help="use the conventional Adam update in the stochastic optimizer",
            )

    defaults = sub.add_parser("defaults", help="write the bundled experiment configs")
    defaults.add_argument("--out", default="configs", help="directory for the config files")

    report = sub.add_parser("report", help="render figures from a completed run directory")
    report.add_argument("--run", required=True, help="output directory of a finished run")
    return parser


def _apply_section_overrides(tree: dict, kind: str, args: argparse.Namespace) -> None:
    section = tree.setdefault(kind, {}) or {}
    if not isinstance(section, dict):
        return  # leave the malformed section for the validator to report
    tree[kind] = section
    if kind == "constrained":
        if args.min_time:
            section["mode"] = "min-time"
        elif args.T is not None:
            section["mode"] = "fixed"
            section["horizon"] = args.T
    if kind == "simultaneous":
        if args.sizes is not None:
            try:
                section["sizes"] = [int(part) for part in args.sizes.split(",") if part]
            except ValueError:
                raise ConfigError(
                    f"--sizes expects comma-separated integers, got {args.sizes!r}"
                ) from None
        if args.algo is not None:
            section["algorithms"] = (
                ["gd", "cg", "sgd"] if args.algo == "all" else [args.algo]
            )
        if args.adam_standard:
            section["standard_adam"] = True


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "defaults":
        paths = write_bundled_defaults(args.out)
        for path in paths:
            print(path)
        return 0

    if args.command == "report":
        from .report import render_report  # matplotlib import deferred to here

        try:
            paths = render_report(args.run)
        except ConfigError as exc:
            print(f"fraclap: config error: {exc}", file=sys.stderr)
            return 2
        for path in paths:
            print(path)
        return 0

    kind = _RUN_KINDS[args.command]
    try:
        tree = load_tree(args.config)
        if tree.get("kind") != kind:
            raise ConfigError(
                f"config {args.config} has kind {tree.get('kind')!r}; "
                f"subcommand {args.command} expects {kind!r}"
            )
        _apply_section_overrides(tree, kind, args)
        config = config_from_tree(tree, output_dir=args.out, seed=args.seed)
    except ConfigError as exc:
        print(f"fraclap: config error: {exc}", file=sys.stderr)
        return 2

    from .runner import run_experiment  # heavy modules deferred past config errors

    try:
        result = run_experiment(config)
    except NumericalError as exc:
        module = exc.module or "fraclap"
        print(f"fraclap: numerical failure in {module}: {exc}", file=sys.stderr)
        return 3
    for path in result.files:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
