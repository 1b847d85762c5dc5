"""Experiment configuration: strict schema, bundled defaults, hashing.

One experiment is described by one YAML file with four top-level keys:
``kind`` (which experiment), ``seed``, ``output_dir``, and one section
named after the kind holding its parameters. Every key is validated
before any computation starts and unknown keys are rejected at every
level, so a typo fails the run instead of silently running the default.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import yaml

from .errors import ConfigError

__all__ = [
    "KINDS",
    "PROFILES",
    "ExperimentConfig",
    "EllipticParams",
    "InteriorParams",
    "ExteriorParams",
    "ConstrainedParams",
    "SimultaneousParams",
    "profile_function",
    "load_tree",
    "config_from_tree",
    "load_config",
    "config_sha1",
    "bundled_defaults",
    "write_bundled_defaults",
]

KINDS = ("elliptic", "interior", "exterior", "constrained", "simultaneous")

PROFILES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin_pi": lambda x: np.sin(np.pi * np.asarray(x, dtype=float)),
    "cos_half_pi": lambda x: np.cos(0.5 * np.pi * np.asarray(x, dtype=float)),
}


def profile_function(name: str, scale: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Named initial profile, optionally rescaled."""
    try:
        base = PROFILES[name]
    except KeyError:
        raise ConfigError(
            f"unknown profile {name!r}; available: {sorted(PROFILES)}"
        ) from None
    return lambda x: scale * base(x)


_REQUIRED = object()


class _Section:
    """Mapping view that tracks consumed keys and rejects leftovers."""

    def __init__(self, mapping: Any, where: str):
        if mapping is None:
            mapping = {}
        if not isinstance(mapping, Mapping):
            raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
        self._data = dict(mapping)
        self.where = where

    def take(self, key: str, default: Any = _REQUIRED) -> Any:
        if key in self._data:
            return self._data.pop(key)
        if default is _REQUIRED:
            raise ConfigError(f"{self.where}: missing required key {key!r}")
        return default

    def finish(self) -> None:
        if self._data:
            raise ConfigError(f"{self.where}: unknown keys {sorted(self._data)}")


def _float(value: Any, where: str, *, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    out = float(value)
    if not math.isfinite(out):
        raise ConfigError(f"{where}: must be finite, got {out!r}")
    if positive and not out > 0.0:
        raise ConfigError(f"{where}: must be positive, got {out!r}")
    return out


def _int(value: Any, where: str, *, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: must be at least {minimum}, got {value}")
    return int(value)


def _bool(value: Any, where: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    return value


def _str(value: Any, where: str, choices: tuple[str, ...] | None = None) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    if choices is not None and value not in choices:
        raise ConfigError(f"{where}: must be one of {list(choices)}, got {value!r}")
    return value


def _float_tuple(
    value: Any, where: str, *, positive: bool = False, minimum_len: int = 1
) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{where}: expected a list, got {value!r}")
    out = tuple(_float(v, f"{where}[{i}]", positive=positive) for i, v in enumerate(value))
    if len(out) < minimum_len:
        raise ConfigError(f"{where}: needs at least {minimum_len} entries")
    if len(set(out)) != len(out):
        raise ConfigError(f"{where}: entries must be distinct")
    return out


def _interval(value: Any, where: str) -> tuple[float, float]:
    pair = _float_tuple(value, where, minimum_len=2)
    if len(pair) != 2 or not pair[0] < pair[1]:
        raise ConfigError(f"{where}: expected an ascending pair [lo, hi], got {value!r}")
    return pair


def _orders(value: Any, where: str) -> tuple[float, ...]:
    orders = _float_tuple(value, where, minimum_len=1)
    for s in orders:
        if not (0.0 < s < 1.0):
            raise ConfigError(f"{where}: orders must lie in (0, 1), got {s}")
    return orders


def _profile(section: _Section, key: str = "profile", default: str = "sin_pi") -> str:
    name = _str(section.take(key, default), f"{section.where}.{key}")
    if name not in PROFILES:
        raise ConfigError(
            f"{section.where}.{key}: unknown profile {name!r}; available: {sorted(PROFILES)}"
        )
    return name


@dataclass(frozen=True)
class EllipticParams:
    """Uniform-load convergence study of the stationary problem."""

    orders: tuple[float, ...] = (0.25, 0.5, 0.75)
    widths: tuple[float, ...] = (1 / 32, 1 / 64, 1 / 128, 1 / 256, 1 / 512)
    reference_refinement: int = 4

    @classmethod
    def from_section(cls, section: _Section) -> "EllipticParams":
        default = cls()
        params = cls(
            orders=_orders(section.take("orders", list(default.orders)), f"{section.where}.orders"),
            widths=_float_tuple(
                section.take("widths", list(default.widths)),
                f"{section.where}.widths",
                positive=True,
                minimum_len=2,
            ),
            reference_refinement=_int(
                section.take("reference_refinement", default.reference_refinement),
                f"{section.where}.reference_refinement",
                minimum=4,
            ),
        )
        section.finish()
        return params


@dataclass(frozen=True)
class InteriorParams:
    """Interior null-control mesh sweep with the penalty tied to the mesh."""

    orders: tuple[float, ...] = (0.2, 0.8)
    region: tuple[float, float] = (-0.3, 0.8)
    horizon: float = 0.3
    n_levels: int = 160
    widths: tuple[float, ...] = (1 / 16, 1 / 32, 1 / 64, 1 / 128, 1 / 256)
    profile: str = "sin_pi"
    tol: float = 1e-7

    @classmethod
    def from_section(cls, section: _Section) -> "InteriorParams":
        default = cls()
        params = cls(
            orders=_orders(section.take("orders", list(default.orders)), f"{section.where}.orders"),
            region=_interval(section.take("region", list(default.region)), f"{section.where}.region"),
            horizon=_float(section.take("horizon", default.horizon), f"{section.where}.horizon", positive=True),
            n_levels=_int(section.take("n_levels", default.n_levels), f"{section.where}.n_levels", minimum=2),
            widths=_float_tuple(
                section.take("widths", list(default.widths)),
                f"{section.where}.widths",
                positive=True,
                minimum_len=2,
            ),
            profile=_profile(section),
            tol=_float(section.take("tol", default.tol), f"{section.where}.tol", positive=True),
        )
        section.finish()
        return params


@dataclass(frozen=True)
class ExteriorParams:
    """Exterior (Robin-approximated) control mesh sweep."""

    orders: tuple[float, ...] = (0.2, 0.8)
    region: tuple[float, float] = (1.7, 1.9)
    horizon: float = 0.4
    n_levels: int = 40
    widths: tuple[float, ...] = (1 / 8, 1 / 16, 1 / 32, 1 / 64)
    robin_n: float = 1e9
    kappa: float = 1.0
    profile: str = "cos_half_pi"
    tol: float = 1e-7

    @classmethod
    def from_section(cls, section: _Section) -> "ExteriorParams":
        default = cls()
        params = cls(
            orders=_orders(section.take("orders", list(default.orders)), f"{section.where}.orders"),
            region=_interval(section.take("region", list(default.region)), f"{section.where}.region"),
            horizon=_float(section.take("horizon", default.horizon), f"{section.where}.horizon", positive=True),
            n_levels=_int(section.take("n_levels", default.n_levels), f"{section.where}.n_levels", minimum=2),
            widths=_float_tuple(
                section.take("widths", list(default.widths)),
                f"{section.where}.widths",
                positive=True,
                minimum_len=2,
            ),
            robin_n=_float(section.take("robin_n", default.robin_n), f"{section.where}.robin_n", positive=True),
            kappa=_float(section.take("kappa", default.kappa), f"{section.where}.kappa"),
            profile=_profile(section, default=default.profile),
            tol=_float(section.take("tol", default.tol), f"{section.where}.tol", positive=True),
        )
        if params.kappa < 0.0:
            raise ConfigError(f"{section.where}.kappa: must be nonnegative")
        section.finish()
        return params


@dataclass(frozen=True)
class ConstrainedParams:
    """Non-negative tracking control, fixed horizon or minimal-time search."""

    order: float = 0.8
    region: tuple[float, float] = (-0.3, 0.5)
    width: float = 1 / 32
    time_step: float = 0.01
    penalty: float = 1e-10
    profile: str = "sin_pi"
    target_profile: str = "cos_half_pi"
    target_scale: float = 0.5
    level: float = 0.02
    horizon: float = 1.0
    mode: str = "fixed"  # "fixed" | "min-time"
    bracket: tuple[float, float] = (0.2, 1.2)
    bisect_width: float = 0.02
    max_iter: int = 12_000
    stage_iter: int = 600

    @classmethod
    def from_section(cls, section: _Section) -> "ConstrainedParams":
        default = cls()
        order = _float(section.take("order", default.order), f"{section.where}.order", positive=True)
        if not (0.0 < order < 1.0):
            raise ConfigError(f"{section.where}.order: must lie in (0, 1), got {order}")
        params = cls(
            order=order,
            region=_interval(section.take("region", list(default.region)), f"{section.where}.region"),
            width=_float(section.take("width", default.width), f"{section.where}.width", positive=True),
            time_step=_float(section.take("time_step", default.time_step), f"{section.where}.time_step", positive=True),
            penalty=_float(section.take("penalty", default.penalty), f"{section.where}.penalty", positive=True),
            profile=_profile(section),
            target_profile=_profile(section, key="target_profile", default=default.target_profile),
            target_scale=_float(section.take("target_scale", default.target_scale), f"{section.where}.target_scale", positive=True),
            level=_float(section.take("level", default.level), f"{section.where}.level", positive=True),
            horizon=_float(section.take("horizon", default.horizon), f"{section.where}.horizon", positive=True),
            mode=_str(section.take("mode", default.mode), f"{section.where}.mode", choices=("fixed", "min-time")),
            bracket=_interval(section.take("bracket", list(default.bracket)), f"{section.where}.bracket"),
            bisect_width=_float(section.take("bisect_width", default.bisect_width), f"{section.where}.bisect_width", positive=True),
            max_iter=_int(section.take("max_iter", default.max_iter), f"{section.where}.max_iter", minimum=1),
            stage_iter=_int(section.take("stage_iter", default.stage_iter), f"{section.where}.stage_iter", minimum=1),
        )
        section.finish()
        return params


@dataclass(frozen=True)
class SimultaneousParams:
    """Shared-control optimizer comparison over growing family sizes."""

    span: tuple[float, float] = (0.6, 0.9)
    region: tuple[float, float] = (-0.5, 0.8)
    horizon: float = 0.4
    n_levels: int = 8
    width: float = 1 / 16
    penalty: float = 1e-2
    tol: float = 1e-4
    sizes: tuple[int, ...] = (2, 10, 50)
    algorithms: tuple[str, ...] = ("gd", "cg", "sgd")
    profile: str = "sin_pi"
    gd_learning_rate: float | None = None
    sgd_learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    standard_adam: bool = False

    @classmethod
    def from_section(cls, section: _Section) -> "SimultaneousParams":
        default = cls()
        span = _interval(section.take("span", list(default.span)), f"{section.where}.span")
        if not (0.5 <= span[0] and span[1] <= 1.0):
            raise ConfigError(
                f"{section.where}.span: family orders must stay inside [0.5, 1.0], got {list(span)}"
            )
        raw_sizes = section.take("sizes", list(default.sizes))
        if not isinstance(raw_sizes, (list, tuple)) or not raw_sizes:
            raise ConfigError(f"{section.where}.sizes: expected a non-empty list")
        sizes = tuple(
            _int(v, f"{section.where}.sizes[{i}]", minimum=1) for i, v in enumerate(raw_sizes)
        )
        raw_algos = section.take("algorithms", list(default.algorithms))
        if not isinstance(raw_algos, (list, tuple)) or not raw_algos:
            raise ConfigError(f"{section.where}.algorithms: expected a non-empty list")
        algorithms = tuple(
            _str(v, f"{section.where}.algorithms[{i}]", choices=("gd", "cg", "sgd"))
            for i, v in enumerate(raw_algos)
        )
        if len(set(algorithms)) != len(algorithms):
            raise ConfigError(f"{section.where}.algorithms: entries must be distinct")
        gd_rate = section.take("gd_learning_rate", default.gd_learning_rate)
        if gd_rate is not None:
            gd_rate = _float(gd_rate, f"{section.where}.gd_learning_rate", positive=True)
        params = cls(
            span=span,
            region=_interval(section.take("region", list(default.region)), f"{section.where}.region"),
            horizon=_float(section.take("horizon", default.horizon), f"{section.where}.horizon", positive=True),
            n_levels=_int(section.take("n_levels", default.n_levels), f"{section.where}.n_levels", minimum=2),
            width=_float(section.take("width", default.width), f"{section.where}.width", positive=True),
            penalty=_float(section.take("penalty", default.penalty), f"{section.where}.penalty", positive=True),
            tol=_float(section.take("tol", default.tol), f"{section.where}.tol", positive=True),
            sizes=sizes,
            algorithms=algorithms,
            profile=_profile(section),
            gd_learning_rate=gd_rate,
            sgd_learning_rate=_float(
                section.take("sgd_learning_rate", default.sgd_learning_rate),
                f"{section.where}.sgd_learning_rate",
                positive=True,
            ),
            adam_beta1=_float(section.take("adam_beta1", default.adam_beta1), f"{section.where}.adam_beta1", positive=True),
            adam_beta2=_float(section.take("adam_beta2", default.adam_beta2), f"{section.where}.adam_beta2", positive=True),
            adam_eps=_float(section.take("adam_eps", default.adam_eps), f"{section.where}.adam_eps", positive=True),
            standard_adam=_bool(section.take("standard_adam", default.standard_adam), f"{section.where}.standard_adam"),
        )
        for name in ("adam_beta1", "adam_beta2"):
            if not (0.0 < getattr(params, name) < 1.0):
                raise ConfigError(f"{section.where}.{name}: must lie in (0, 1)")
        section.finish()
        return params


_PARSERS = {
    "elliptic": EllipticParams.from_section,
    "interior": InteriorParams.from_section,
    "exterior": ExteriorParams.from_section,
    "constrained": ConstrainedParams.from_section,
    "simultaneous": SimultaneousParams.from_section,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully validated experiment description.

    ``raw`` is the canonical tree the run actually uses (overrides already
    applied); it is echoed verbatim into the summary provenance and hashed
    into every output file.
    """

    kind: str
    seed: int
    output_dir: str
    params: Any
    raw: dict = field(repr=False)

    @property
    def sha1(self) -> str:
        return config_sha1(self.raw)


def config_sha1(tree: Mapping) -> str:
    """Order-independent digest of a configuration tree."""
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(blob.encode()).hexdigest()


def load_tree(path) -> dict:
    """Read a YAML file into a plain tree, wrapping I/O and syntax errors."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(tree, Mapping):
        raise ConfigError(f"config {path} must be a mapping, got {type(tree).__name__}")
    return dict(tree)


def config_from_tree(
    tree: Mapping,
    *,
    output_dir: str | None = None,
    seed: int | None = None,
) -> ExperimentConfig:
    """Validate a configuration tree, applying optional overrides first."""
    tree = dict(tree)
    if output_dir is not None:
        tree["output_dir"] = str(output_dir)
    if seed is not None:
        tree["seed"] = int(seed)
    top = _Section(tree, "config")
    kind = _str(top.take("kind"), "config.kind", choices=KINDS)
    seed_value = _int(top.take("seed", 0), "config.seed", minimum=0)
    out = _str(top.take("output_dir", f"runs/{kind}"), "config.output_dir")
    section = _Section(top.take(kind, {}), f"config.{kind}")
    params = _PARSERS[kind](section)
    top.finish()
    canonical = {"kind": kind, "seed": seed_value, "output_dir": out, kind: _params_tree(params)}
    return ExperimentConfig(kind=kind, seed=seed_value, output_dir=out, params=params, raw=canonical)


def load_config(path, *, output_dir: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Load and validate a YAML experiment configuration."""
    return config_from_tree(load_tree(path), output_dir=output_dir, seed=seed)


def _params_tree(params: Any) -> dict:
    """Serialize a params dataclass to YAML-native types, dropping nulls."""
    out = {}
    for key, value in asdict(params).items():
        if value is None:
            continue
        if isinstance(value, tuple):
            value = list(value)
        out[key] = value
    return out


def bundled_defaults() -> dict[str, dict]:
    """The five ready-to-run experiment trees, keyed by file name."""
    trees = {}
    for kind in KINDS:
        params = _PARSERS[kind](_Section({}, f"config.{kind}"))
        trees[f"{kind}.yaml"] = {
            "kind": kind,
            "seed": 0,
            "output_dir": f"runs/{kind}",
            kind: _params_tree(params),
        }
    return trees


def write_bundled_defaults(out_dir) -> list[Path]:
    """Write the bundled default configs; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, tree in sorted(bundled_defaults().items()):
        path = out / name
        path.write_text(yaml.safe_dump(tree, sort_keys=True))
        paths.append(path)
    return paths
