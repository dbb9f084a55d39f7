"""Experiment configuration (YAML) and process settings (environment)."""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from .augment import VaeConfig
from .baseline import OcsvmConfig
from .errors import ConfigError
from .models import ModelHyperparameters
from .sim import (
    FaultKind,
    FaultSpec,
    LoadProfile,
    SensorModel,
    default_profile,
    default_sensors,
)

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "config/default.yaml"


def derive_seed(seed: int, stage: str) -> int:
    """Stage seed from the global seed: SHA-256 of ``"{seed}:{stage}"`` as 32 bits."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def default_fault() -> FaultSpec:
    """A +20% step on six monitored channels, three quarters into the run."""
    return FaultSpec(
        kind=FaultKind.CATASTROPHIC_STEP,
        target_channels=[
            "water_pump_pressure",
            "fuel_pressure",
            "injected_fuel",
            "oil_mist",
            "rail_pressure",
            "turbo_speed",
        ],
        onset_s=15000.0,
        magnitude=0.2,
        mode="relative",
    )


class SimulationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    profile: LoadProfile = Field(default_factory=default_profile)
    sensors: List[SensorModel] = Field(default_factory=default_sensors)
    fault: Optional[FaultSpec] = Field(default_factory=default_fault)


class PrepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    window_seconds: float = Field(default=300.0, gt=0)
    top_k: int = Field(default=8, ge=1)
    min_deviation_pct: float = Field(default=2.0, ge=0)
    train_fraction: float = 0.75
    chronological_split: bool = False
    denoise_training: bool = False

    @field_validator("train_fraction")
    @classmethod
    def _check_fraction(cls, value: float) -> float:
        if not 0 < value < 1:
            raise ValueError(f"train_fraction must lie in (0, 1), got {value}")
        return value


class AugmentationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    ratio: float = Field(default=1.0, ge=0)
    ablation: bool = True
    vae: VaeConfig = Field(default_factory=VaeConfig)


class DetectionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    margin: float = Field(default=1.5, gt=0)
    deviation_threshold: float = Field(default=0.05, gt=0)
    floor: float = Field(default=1e-6, gt=0)
    warmup_samples: Optional[int] = Field(default=None, ge=0)
    confirm_samples: int = Field(default=1, ge=1)


class ExperimentConfig(BaseModel):
    """Everything one experiment run depends on; stage seeds derive from ``seed``."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    prep: PrepConfig = Field(default_factory=PrepConfig)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    models: ModelHyperparameters = Field(default_factory=ModelHyperparameters)
    detection: DetectionConfig = Field(default_factory=DetectionConfig)
    baseline: OcsvmConfig = Field(default_factory=OcsvmConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        step = self.simulation.profile.step_s
        samples = self.prep.window_seconds / step
        if abs(samples - round(samples)) > 1e-9:
            raise ValueError(
                f"prep.window_seconds={self.prep.window_seconds} is not a multiple "
                f"of simulation.profile.step_s={step} ({samples:g} samples)"
            )
        fault = self.simulation.fault
        if fault is not None:
            duration = self.simulation.profile.duration_s
            if fault.onset_s > duration:
                raise ValueError(
                    f"simulation.fault.onset_s={fault.onset_s} lies beyond the "
                    f"{duration}s run"
                )
            names = {s.channel_id for s in self.simulation.sensors}
            unknown = [c for c in fault.target_channels if c not in names]
            if unknown:
                raise ValueError(
                    f"simulation.fault.target_channels {unknown} are not sensors"
                )
        return self

    @property
    def window_samples(self) -> int:
        return int(round(self.prep.window_seconds / self.simulation.profile.step_s))

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def digest(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


class Settings(BaseModel):
    """Process settings from the environment (``.env`` is loaded by the CLI)."""

    log_level: str = "INFO"
    runs_dir: str = "runs"
    config_path: str = DEFAULT_CONFIG_PATH

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            log_level=os.getenv("DERIVWATCH_LOG_LEVEL", "INFO").upper(),
            runs_dir=os.getenv("DERIVWATCH_RUNS_DIR", "runs"),
            config_path=os.getenv("DERIVWATCH_CONFIG", DEFAULT_CONFIG_PATH),
        )


def _parse_yaml(text: str, source: str) -> Dict[str, Any]:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "?"
        raise ConfigError(f"{source}: YAML parse error at {where}: {e.problem}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: YAML parse error: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return data


def _field_messages(error: ValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        messages.append(f"{location}: {item['msg']}")
    return messages


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = _parse_yaml(path.read_text(), str(path))
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(
            f"{path}: invalid configuration: " + "; ".join(_field_messages(e))
        ) from e


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_yaml())
    return path


def validate_config(path: Union[str, Path]) -> List[str]:
    """Per-field diagnostics for a config file; empty when it is valid."""
    path = Path(path)
    if not path.exists():
        return [f"{path}: file not found"]
    try:
        data = _parse_yaml(path.read_text(), str(path))
    except ConfigError as e:
        return [str(e)]
    try:
        ExperimentConfig.model_validate(data)
    except ValidationError as e:
        return [f"{path}: {message}" for message in _field_messages(e)]
    return []


def apply_overrides(
    config: ExperimentConfig, overrides: Sequence[str]
) -> ExperimentConfig:
    """Apply ``section.field=value`` assignments; values are parsed as YAML."""
    if not overrides:
        return config
    data = config.model_dump(mode="json")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like section.field=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        for depth, key in enumerate(keys):
            if not isinstance(node, dict) or key not in node:
                known = ", ".join(sorted(node)) if isinstance(node, dict) else ""
                raise ConfigError(
                    f"unknown config path '{'.'.join(keys[: depth + 1])}'"
                    + (f" (expected one of: {known})" if known else "")
                )
            if depth == len(keys) - 1:
                node[key] = _parse_yaml(f"value: {raw}", item)["value"]
            else:
                node = node[key]
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(
            "invalid override: " + "; ".join(_field_messages(e))
        ) from e


def resolve_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """Config file (or defaults), then ``--set`` overrides, then ``--seed``."""
    config = load_config(path) if path else ExperimentConfig()
    config = apply_overrides(config, overrides)
    if seed is not None:
        try:
            config = ExperimentConfig.model_validate(
                {**config.model_dump(mode="json"), "seed": seed}
            )
        except ValidationError as e:
            raise ConfigError("; ".join(_field_messages(e))) from e
    return config
