"""Run configuration files (YAML or JSON) with defaults for the two
synthetic setups.  Unknown keys and invalid values raise
:class:`~ppenkf.core.ValidationError` with a dotted path to the offending key.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, field_validator

from .core import ValidationError
from .experiment import ExperimentConfig
from .filters import VARIANTS

Variant = Literal["enkf", "damped", "local", "hybrid", "iterative", "dual",
                  "normal_score", "pp_enkf", "interpolated"]
CORR_LENGTH_FACTORS = {"half": 0.5, "correct": 1.0, "double": 2.0}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ExperimentSection(_Strict):
    scenario: Literal["tracer", "well"] = "tracer"
    variant: Variant = "pp_enkf"
    n_e: int = Field(50, ge=2)
    truth_mode: Literal["fixed", "per_experiment"] = "fixed"
    truth_seed: int = Field(1, ge=0)
    truth_mean: float = -12.0
    prior_mean: float = -12.5
    std: float = Field(0.5, ge=0)
    truth_corr_length: Optional[float] = Field(None, gt=0)
    prior_corr_length: Optional[float] = Field(None, gt=0)
    range_factor: float = Field(2.0, gt=0)
    pilot_grid: Literal["standard", "regular", "diagonal", "double", "all"] = "standard"
    pilot_k: int = Field(7, ge=1)
    cross_cov_source: Literal["empirical", "analytic"] = "empirical"
    cross_cov_fields: int = Field(10_000, ge=2)
    cross_cov_seed: int = Field(2, ge=0)
    damping: float = Field(0.1, ge=0, le=1)
    localization_length_scale: float = Field(150.0, gt=0)
    hybrid_alpha: float = Field(0.5, ge=0, le=1)
    background_param_variance: float = Field(0.25, ge=0)
    n_steps: int = Field(1200, ge=1)
    n_obs: Optional[int] = Field(None, ge=1)
    specific_storage: float = Field(1.0e-4, gt=0)
    noise_inflation: float = Field(1.0, gt=0)
    clip_concentration: bool = True
    correlation_obs_index: int = -1
    kriging_covariance: Literal["ensemble", "prior"] = "ensemble"

    def build(self, seed: int, experiment_index: int = 0, **overrides) -> ExperimentConfig:
        values = self.model_dump()
        values.update(overrides)
        return ExperimentConfig(seed=seed, experiment_index=experiment_index, **values)


class SuiteSection(_Strict):
    scenarios: list[Literal["tracer", "well"]] = ["tracer", "well"]
    methods: list[Variant] = list(VARIANTS)
    ensemble_sizes: list[int] = [50, 70, 100, 250]
    corr_lengths: list[Union[Literal["half", "correct", "double"], float]] = ["correct"]
    n_seeds: int = Field(20, ge=1)
    n_ref: int = Field(2000, ge=2)
    benchmark: bool = True

    @field_validator("ensemble_sizes")
    @classmethod
    def _sizes(cls, v):
        if not v or any(n < 2 for n in v):
            raise ValueError("ensemble sizes must be a non-empty list of integers >= 2")
        return v

    @field_validator("methods", "scenarios", "corr_lengths")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("must not be empty")
        if len(set(map(str, v))) != len(v):
            raise ValueError("entries must be distinct")
        return v


class BenchmarkSection(_Strict):
    n_ref: int = Field(2000, ge=2)


class CompareSection(_Strict):
    methods: list[Variant] = ["enkf", "pp_enkf"]
    n_e: int = Field(50, ge=2)
    n_seeds: int = Field(10, ge=1)
    n_ref: int = Field(2000, ge=2)


class FieldsSection(_Strict):
    n_fields: int = Field(10, ge=1)
    which: Literal["prior", "truth"] = "prior"


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2 ** 64)
    experiment: ExperimentSection = ExperimentSection()
    suite: SuiteSection = SuiteSection()
    benchmark: BenchmarkSection = BenchmarkSection()
    compare: CompareSection = CompareSection()
    fields: FieldsSection = FieldsSection()

    def corr_length(self, scenario: str, spec) -> Optional[float]:
        """Prior correlation length for a suite entry (None = scenario default)."""
        from .experiment import DEFAULT_CORR_LENGTH
        if isinstance(spec, str):
            return CORR_LENGTH_FACTORS[spec] * DEFAULT_CORR_LENGTH[scenario]
        return float(spec)


def _format_error(err: PydanticError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def config_from_mapping(data) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError("<root>: configuration must be a mapping")
    try:
        cfg = RunConfig.model_validate(data)
    except PydanticError as err:
        raise ValidationError(_format_error(err)) from None
    # cross-field checks of the experiment section
    try:
        cfg.experiment.build(cfg.seed)
    except ValidationError as err:
        raise ValidationError(f"experiment: {err}") from None
    return cfg


def parse_config(path) -> RunConfig:
    """Read a YAML (or JSON) run configuration and apply defaults."""
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file {p} does not exist")
    text = p.read_text(encoding="utf-8")
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(text) if text.strip() else {}
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ValidationError(f"{p}: cannot parse: {err}") from None
    return config_from_mapping(data)
