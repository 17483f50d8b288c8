"""Run configuration: nested dataclasses loaded from a YAML document.

Relative paths resolve against the directory of the config file. Unknown
keys are errors so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .climate import DEFAULT_ALPHA1_GRID, Lattice, Stage1Spec
from .health import HealthSpec
from .simulate import ClimateTruth, HealthTruth, StudyDesign

INTERACTION_CHOICES = ("none", "I", "II", "III", "IV", "sweep")


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    graph: str | None = None
    cases: str | None = None
    covariates: str | None = None
    stations: str | None = None
    gridded: str | None = None
    grid: str | None = None
    boundaries: str | None = None


@dataclass
class LatticeConfig:
    nx: int = 20
    ny: int = 20
    h: float = 10.0
    origin: list = field(default_factory=lambda: [0.0, 0.0])


@dataclass
class Stage1Config:
    family: str = "stations"
    formula: str = ""
    alpha1_grid: list = field(default_factory=lambda: list(DEFAULT_ALPHA1_GRID))
    lattice: LatticeConfig | None = None
    sigma0: float | None = None
    range0: float | None = None
    fixed_precision: float = 1e-3
    ar_prior_precision: float = 0.15
    covariate: str = "temperature"

    def to_spec(self) -> Stage1Spec:
        lat = None
        if self.lattice is not None:
            lat = Lattice(self.lattice.nx, self.lattice.ny, self.lattice.h, tuple(self.lattice.origin))
        return Stage1Spec(family=self.family, formula=self.formula, alpha1_grid=tuple(float(a) for a in self.alpha1_grid),
                          lattice=lat, sigma0=self.sigma0, range0=self.range0,
                          fixed_precision=self.fixed_precision, ar_prior_precision=self.ar_prior_precision)


@dataclass
class HealthConfig:
    formula: str = "temperature"
    bym2: bool = True
    rw2: bool = True
    iid_time: bool = True
    interaction: str = "II"
    component_intercepts: bool = True
    strategy: str = "sample"
    n_samples: int = 1000
    threshold: float = 1.0
    psi_u: float = 1.0
    psi_alpha: float = 0.01
    gamma_shape: float = 1.0
    gamma_rate: float = 5e-5

    def to_spec(self, interaction: str | None = None) -> HealthSpec:
        kind = self.interaction if interaction is None else interaction
        return HealthSpec(formula=self.formula, bym2=self.bym2, rw2=self.rw2, iid_time=self.iid_time,
                          interaction=None if kind == "none" else kind,
                          component_intercepts=self.component_intercepts, psi_u=self.psi_u,
                          psi_alpha=self.psi_alpha, gamma_shape=self.gamma_shape, gamma_rate=self.gamma_rate)

    def kinds(self) -> list[str]:
        return ["I", "II", "III", "IV"] if self.interaction == "sweep" else [self.interaction]


@dataclass
class PropagationConfig:
    method: str = "plugin"
    J: int = 15
    force_mean: bool = False
    component_draws: int = 200


@dataclass
class SimulationConfig:
    design: StudyDesign = field(default_factory=StudyDesign)
    climate: ClimateTruth = field(default_factory=ClimateTruth)
    gamma: dict = field(default_factory=lambda: {"intercept": 0.0, "temperature": 0.3})
    tau_psi: float = 4.0
    phi: float = 0.5
    tau_nu: float = 50.0
    tau_zeta: float = 50.0
    tau_upsilon: float = 10.0
    rho_upsilon: float = 0.7

    def health_truth(self) -> HealthTruth:
        return HealthTruth(dict(self.gamma), self.tau_psi, self.phi, self.tau_nu, self.tau_zeta,
                           self.tau_upsilon, self.rho_upsilon)


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    health: HealthConfig = field(default_factory=HealthConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    seed: int | None = None
    out: str = "out"
    jobs: int = 1

    def validate(self) -> None:
        if self.stage1.family not in ("stations", "fusion"):
            raise ConfigError(f"stage1.family must be 'stations' or 'fusion', got {self.stage1.family!r}")
        if self.health.interaction not in INTERACTION_CHOICES:
            raise ConfigError(f"health.interaction must be one of {INTERACTION_CHOICES}")
        if self.health.strategy not in ("mode", "axis", "sample"):
            raise ConfigError(f"health.strategy must be mode, axis or sample, got {self.health.strategy!r}")
        if self.propagation.method not in ("plugin", "resample"):
            raise ConfigError(f"propagation.method must be 'plugin' or 'resample', got {self.propagation.method!r}")
        if self.propagation.J < 1:
            raise ConfigError("propagation.J must be >= 1")
        if self.propagation.method == "resample" and self.seed is None:
            raise ConfigError("resample runs need a seed")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: Any, where: str):
    if data is None:
        return None
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kw = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kw[name] = _build(sub, value, f"{where}.{name}" if where else name) if sub is not None else value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


_NESTED = {
    (RunConfig, "paths"): PathsConfig, (RunConfig, "stage1"): Stage1Config, (RunConfig, "health"): HealthConfig,
    (RunConfig, "propagation"): PropagationConfig, (RunConfig, "simulation"): SimulationConfig,
    (Stage1Config, "lattice"): LatticeConfig, (SimulationConfig, "design"): StudyDesign,
    (SimulationConfig, "climate"): ClimateTruth,
}


def from_dict(data: dict | None, base_dir: Path | None = None) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    if base_dir is not None:
        for f in fields(PathsConfig):
            p = getattr(cfg.paths, f.name)
            if p is not None and not Path(p).is_absolute():
                setattr(cfg.paths, f.name, str(base_dir / p))
    cfg.validate()
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data, path.parent)


def defaults_yaml() -> str:
    return yaml.safe_dump(RunConfig().to_dict(), sort_keys=False)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
