"""Experiment configuration: YAML files validated against a strict schema.

Unknown keys are rejected, and validation errors carry the line number of
the offending entry.  Physical preconditions (positive coefficients, valid
grids, sample times on the step lattice) are re-checked at load time by
building the library objects.
"""

from __future__ import annotations

import hashlib
import math
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .core import Constant, General, ModelParams, RatioLocked, piecewise_linear
from .errors import ConfigError
from .sde import IntegratorScheme
from .spectral import RegimeParams, SpectralGrid

__all__ = ["ExperimentConfig", "load_config", "load_preset", "preset_names", "config_digest"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Triple = tuple[float, float, float]


class Knots(_Strict):
    knots: list[float]
    values: list[float]


class CoefficientsCfg(_Strict):
    kind: Literal["constant", "ratio_locked", "general"] = "constant"
    a: float | Knots
    b: Optional[float | Knots] = None
    v_eq_sq: Optional[float] = None

    @model_validator(mode="after")
    def _shape(self):
        if self.kind == "constant":
            if not isinstance(self.a, float) or not isinstance(self.b, float):
                raise ValueError("constant coefficients need numeric a and b")
        elif self.kind == "ratio_locked":
            if self.v_eq_sq is None or self.b is not None:
                raise ValueError("ratio_locked takes a and v_eq_sq (b is derived)")
        elif self.b is None:
            raise ValueError("general coefficients need a and b")
        return self

    @model_validator(mode="after")
    def _buildable(self):
        self.build()
        return self

    def build(self):
        def fn(spec):
            return piecewise_linear(spec.knots, spec.values) if isinstance(spec, Knots) else piecewise_linear([0.0], [spec])

        if self.kind == "constant":
            return Constant(self.a, self.b)
        if self.kind == "ratio_locked":
            return RatioLocked(fn(self.a), self.v_eq_sq)
        return General(fn(self.a), fn(self.b))


class ModelCfg(_Strict):
    coefficients: CoefficientsCfg
    v0: Triple
    x0: Triple = (0.0, 0.0, 0.0)
    H: Triple = (0.0, 0.0, 0.0)

    @model_validator(mode="after")
    def _buildable(self):
        self.build()
        return self

    def build(self) -> ModelParams:
        return ModelParams(self.coefficients.build(), self.v0, self.x0, self.H)


class SchemeCfg(_Strict):
    kind: Literal["euler_maruyama", "speed_projected"] = "speed_projected"
    dt: float = Field(gt=0)


class GridCfg(_Strict):
    n_per_axis: int
    x_extent: float = Field(gt=0)

    @model_validator(mode="after")
    def _buildable(self):
        self.build()
        return self

    def build(self) -> SpectralGrid:
        return SpectralGrid.from_extent(self.n_per_axis, self.x_extent)


class InitialDensityCfg(_Strict):
    kind: Literal["gaussian"] = "gaussian"
    variance: float = Field(0.05, gt=0)


class SpectralCfg(_Strict):
    lambdas: list[Triple] = Field(default_factory=list)
    density_times: list[float] = Field(default_factory=list)
    initial_density: InitialDensityCfg = InitialDensityCfg()


class RegimeCfg(_Strict):
    kind: Literal["diffusion", "wave"]
    epsilons: list[float] = Field(min_length=1)
    base_a: float = Field(gt=0)
    base_b: float = Field(ge=0)
    t: float = Field(gt=0)
    a_dt: float = Field(0.02, gt=0, description="a * dt for diffusion runs; dt is fixed otherwise")

    def at(self, eps) -> RegimeParams:
        return RegimeParams(eps, self.base_a, self.base_b)


class BinningCfg(_Strict):
    bins: int = Field(16, ge=8)
    half_width: Optional[float] = Field(None, gt=0)
    sigmas: float = Field(4.0, gt=0)


class SweepCfg(_Strict):
    kind: Literal["regime", "v0_reflection"] = "regime"
    sources: list[Literal["mc", "spectral"]] = ["mc", "spectral"]
    binning: BinningCfg = BinningCfg()


class SeedsCfg(_Strict):
    master: int = Field(0, ge=0, lt=2**64)
    null_run: int = Field(1, ge=0, lt=2**64)


class OutputsCfg(_Strict):
    dir: str = "out"
    formats: list[Literal["csv", "binary"]] = ["binary"]


class ThresholdsCfg(_Strict):
    cf_z: float = Field(3.0, gt=0)
    moment_z: float = Field(3.0, gt=0)
    l1: Optional[float] = Field(None, gt=0)
    variance_ratio_z: float = Field(3.0, gt=0)
    pointwise: float = Field(1e-9, gt=0)


class ExperimentConfig(_Strict):
    experiment: str = "experiment"
    model: ModelCfg
    scheme: SchemeCfg
    n_traj: int = Field(ge=1)
    sample_times: list[float] = Field(min_length=1)
    grid: Optional[GridCfg] = None
    spectral: SpectralCfg = SpectralCfg()
    regime: Optional[RegimeCfg] = None
    sweep: SweepCfg = SweepCfg()
    seeds: SeedsCfg = SeedsCfg()
    outputs: OutputsCfg = OutputsCfg()
    thresholds: ThresholdsCfg = ThresholdsCfg()

    @field_validator("sample_times")
    @classmethod
    def _times(cls, v):
        if v[0] != 0 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("sample_times must start at 0 and increase strictly")
        return v

    @model_validator(mode="after")
    def _physics(self):
        scheme = IntegratorScheme(self.scheme.kind, self.scheme.dt)
        for t in self.sample_times:
            if not math.isclose(round(t / scheme.dt) * scheme.dt, t, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError(f"sample time {t} is not a multiple of dt={scheme.dt}")
        if self.regime is not None:
            for eps in self.regime.epsilons:
                self.regime.at(eps)
        return self

    def params(self) -> ModelParams:
        return self.model.build()

    def integrator(self) -> IntegratorScheme:
        return IntegratorScheme(self.scheme.kind, self.scheme.dt)

    def with_overrides(self, seed=None, out=None) -> "ExperimentConfig":
        data = self.model_dump()
        if seed is not None:
            data["seeds"]["master"] = seed
        if out is not None:
            data["outputs"]["dir"] = str(out)
        return ExperimentConfig.model_validate(data)


def _line_of(node, loc):
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == key), None)
            if nxt is None:
                key_node = next((k for k, _ in node.value if k.value == key), None)
                return key_node.start_mark.line + 1 if key_node is not None else line
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
        line = node.start_mark.line + 1
    return line


def _validate(text: str, source: str) -> ExperimentConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            # drop pydantic's union-member tags such as "float" or "Knots"
            loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and (p[:1].isupper() or p in ("float", "int") or "[" in p)))
            line = _line_of(root, loc)
            path = ".".join(str(p) for p in loc) or "<root>"
            msgs.append(f"{source}:{line}: {path}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from None
    except (ValueError, ArithmeticError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return _validate(text, str(path))


def preset_names() -> list[str]:
    folder = resources.files("ortholangevin") / "presets"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".yaml"))


def preset_text(name) -> str:
    if name not in preset_names():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return (resources.files("ortholangevin") / "presets" / f"{name}.yaml").read_text()


def load_preset(name) -> ExperimentConfig:
    return _validate(preset_text(name), f"preset:{name}")


def config_digest(cfg: ExperimentConfig) -> str:
    """sha256 of the canonical JSON form (independent of YAML formatting)."""
    return hashlib.sha256(cfg.model_dump_json().encode()).hexdigest()
