"""Run configuration: YAML file with four strict sections.

Schema (every key optional; unknown keys are rejected)::

    model:       any ModelConfig field (domain_lo, domain_hi, horizon_T, diffusion,
                 diffusion_amp, c_H, c_H_amp, smoothing_eps, smoothing_steps,
                 c_F, c_G, lambda_min)
    grid:        n_cells, n_steps
    experiment:  N_list, n_paths, seeds, n_random, time_stride, initial_measure,
                 m0_center, m0_width, max_iter, anderson,
                 budgets:    memory_bytes, particle_bytes, mc_samples (0 = exact average)
                 tolerances: mfg, linear, nash
    output:      directory, formats
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from reflected_mfg.errors import ConfigError, ReflectedMfgError
from reflected_mfg.grid import Grid1D, GridMeasure, TimeGrid, build_grid
from reflected_mfg.model import Model, ModelConfig

ALLOWED_N = (2, 3, 4)
MEASURE_KINDS = ("uniform", "bump", "point")
FORMATS = ("json", "csv", "bin")


@dataclass(frozen=True)
class GridSection:
    n_cells: int = 41
    n_steps: int = 100


@dataclass(frozen=True)
class Budgets:
    memory_bytes: float = 6e8
    particle_bytes: float = 5e7
    mc_samples: int = 0


@dataclass(frozen=True)
class Tolerances:
    mfg: float = 1e-8
    linear: float = 1e-11
    nash: float = 1e-12


@dataclass(frozen=True)
class ExperimentSection:
    N_list: tuple = (2, 3)
    n_paths: int = 2000
    seeds: tuple = (0,)
    n_random: int = 500
    time_stride: int = 10
    initial_measure: str = "uniform"
    m0_center: float = 0.5
    m0_width: float = 0.15
    max_iter: int = 300
    anderson: int = 5
    budgets: Budgets = field(default_factory=Budgets)
    tolerances: Tolerances = field(default_factory=Tolerances)

    @property
    def seed(self) -> int:
        return self.seeds[0]


@dataclass(frozen=True)
class OutputSection:
    directory: str = "runs/default"
    formats: tuple = ("json", "csv")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    grid: GridSection = field(default_factory=GridSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, section: str, **changes) -> RunConfig:
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    # -- derived objects --

    def build_grid(self) -> Grid1D:
        return build_grid(self.grid.n_cells, (self.model.domain_lo, self.model.domain_hi))

    def build_model(self) -> Model:
        return Model(self.model, self.build_grid())

    def build_time_grid(self) -> TimeGrid:
        return TimeGrid(0.0, self.model.horizon_T, self.grid.n_steps)

    def initial_measure(self, grid: Grid1D) -> GridMeasure:
        e = self.experiment
        if e.initial_measure == "uniform":
            return GridMeasure.uniform(grid)
        if e.initial_measure == "point":
            return GridMeasure.dirac(grid, grid.node_index(e.m0_center))
        bump = np.exp(-0.5 * ((grid.nodes - e.m0_center) / e.m0_width) ** 2)
        return GridMeasure(bump / bump.sum())


_SECTIONS = {"model": ModelConfig, "grid": GridSection, "experiment": ExperimentSection, "output": OutputSection}


def _field_default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _coerce(section: str, name: str, value, default):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build_section(name: str, raw, cls=None) -> object:
    cls = cls or _SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping")
    defaults = {f.name: _field_default(f) for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"{name}.{key}: unknown key {key!r}")
        if dataclasses.is_dataclass(defaults[key]):
            kwargs[key] = _build_section(f"{name}.{key}", value, type(defaults[key]))
        else:
            kwargs[key] = _coerce(name, key, value, defaults[key])
    try:
        return cls(**kwargs)
    except ReflectedMfgError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def validate(cfg: RunConfig) -> RunConfig:
    g, e, o = cfg.grid, cfg.experiment, cfg.output
    if g.n_cells < 8:
        raise ConfigError("grid.n_cells: must be at least 8")
    if g.n_steps < 1:
        raise ConfigError("grid.n_steps: must be positive")
    Ns = list(e.N_list)
    if not Ns or any((not isinstance(n, int)) or n not in ALLOWED_N for n in Ns):
        raise ConfigError(f"experiment.N_list: entries must be drawn from {list(ALLOWED_N)}, got {Ns}")
    if Ns != sorted(set(Ns)):
        raise ConfigError("experiment.N_list: must be strictly increasing")
    for name in ("mfg", "linear", "nash"):
        if not getattr(e.tolerances, name) > 0:
            raise ConfigError(f"experiment.tolerances.{name}: must be positive")
    for name in ("memory_bytes", "particle_bytes"):
        if not getattr(e.budgets, name) > 0:
            raise ConfigError(f"experiment.budgets.{name}: must be positive")
    if e.budgets.mc_samples < 0:
        raise ConfigError("experiment.budgets.mc_samples: must be nonnegative")
    if not e.m0_width > 0:
        raise ConfigError("experiment.m0_width: must be positive")
    for name in ("n_paths", "n_random", "time_stride", "max_iter"):
        if getattr(e, name) < 1:
            raise ConfigError(f"experiment.{name}: must be at least 1")
    if e.anderson < 0:
        raise ConfigError("experiment.anderson: must be nonnegative")
    if not e.seeds or any(isinstance(x, bool) or not isinstance(x, int) or not 0 <= x < 2**64 for x in e.seeds):
        raise ConfigError("experiment.seeds: nonempty list of unsigned 64-bit integers")
    if e.initial_measure not in MEASURE_KINDS:
        raise ConfigError(f"experiment.initial_measure: one of {list(MEASURE_KINDS)}")
    if not cfg.model.domain_lo <= e.m0_center <= cfg.model.domain_hi:
        raise ConfigError("experiment.m0_center: must lie in the domain")
    bad = [f for f in o.formats if f not in FORMATS]
    if bad:
        raise ConfigError(f"output.formats: unknown format(s) {bad}")
    return cfg


def parse_config(path) -> RunConfig:
    """Read and validate a YAML run configuration; an empty file gives all defaults."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    return config_from_dict(raw or {})


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a mapping of sections")
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"{key}: unknown section {key!r}")
    sections = {name: _build_section(name, raw.get(name)) for name in _SECTIONS}
    return validate(RunConfig(**sections))
