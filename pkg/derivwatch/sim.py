"""Synthetic engine telemetry with injected faults.

Stands in for acquisitions from a real engine: a load profile drives rpm and
power, every sensor channel is a smooth map of the operating point plus
Gaussian measurement noise, and faults are layered on top as ageing drifts or
catastrophic steps.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import SimulationError
from .telemetry import INPUT_COLUMNS, Telemetry, write_telemetry_csv

logger = logging.getLogger(__name__)

Breakpoints = List[Tuple[float, float]]


class LoadProfile(BaseModel):
    """Piecewise-linear rpm and power trajectories sampled every ``step_s``."""

    duration_s: float = Field(gt=0)
    step_s: float = Field(default=1.0, gt=0)
    rpm_points: Breakpoints
    power_points: Breakpoints
    shape: str = "custom"
    rpm_noise: float = Field(default=0.0, ge=0)
    power_noise: float = Field(default=0.0, ge=0)

    @field_validator("rpm_points", "power_points")
    @classmethod
    def _check_points(cls, points: Breakpoints) -> Breakpoints:
        if not points:
            raise ValueError("at least one breakpoint is required")
        times = [p[0] for p in points]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("breakpoint times must be non-decreasing")
        if any(value < 0 for _, value in points):
            raise ValueError("trajectory values must be >= 0")
        return points

    @model_validator(mode="after")
    def _check_duration(self) -> "LoadProfile":
        samples = self.duration_s / self.step_s
        if abs(samples - round(samples)) > 1e-9:
            raise ValueError(
                f"duration_s={self.duration_s} is not a multiple of "
                f"step_s={self.step_s} ({samples:g} steps)"
            )
        return self

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s / self.step_s)) + 1

    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.step_s

    def rpm_at(self, t: np.ndarray) -> np.ndarray:
        return _interpolate(self.rpm_points, t)

    def power_at(self, t: np.ndarray) -> np.ndarray:
        return _interpolate(self.power_points, t)

    @classmethod
    def constant(
        cls, duration_s: float, rpm: float, power: float, step_s: float = 1.0
    ) -> "LoadProfile":
        return cls(
            duration_s=duration_s,
            step_s=step_s,
            rpm_points=[(0.0, rpm)],
            power_points=[(0.0, power)],
            shape="constant",
        )

    @classmethod
    def ramp(
        cls,
        duration_s: float,
        rpm_range: Tuple[float, float],
        power_range: Tuple[float, float],
        step_s: float = 1.0,
        hold_fraction: float = 0.2,
        cycles: int = 1,
    ) -> "LoadProfile":
        """Minimum to maximum and back again, ``cycles`` times."""
        if not 0 <= hold_fraction < 1:
            raise SimulationError("hold_fraction must lie in [0, 1)")
        if cycles < 1:
            raise SimulationError("cycles must be >= 1")
        period = duration_s / cycles
        ramp_s = period * (1 - hold_fraction) / 2
        rpm_points: Breakpoints = []
        power_points: Breakpoints = []
        for c in range(cycles):
            start = c * period
            for offset, level in (
                (0.0, 0),
                (ramp_s, 1),
                (period - ramp_s, 1),
                (period, 0),
            ):
                rpm_points.append((start + offset, rpm_range[level]))
                power_points.append((start + offset, power_range[level]))
        return cls(
            duration_s=duration_s,
            step_s=step_s,
            rpm_points=rpm_points,
            power_points=power_points,
            shape="ramp",
        )

    @classmethod
    def staircase(
        cls,
        duration_s: float,
        levels: Sequence[Tuple[float, float]],
        step_s: float = 1.0,
        transition_s: float = 60.0,
    ) -> "LoadProfile":
        """Hold each (rpm, power) level for an equal share of the run."""
        if not levels:
            raise SimulationError("staircase needs at least one level")
        dwell = duration_s / len(levels)
        if transition_s >= dwell:
            raise SimulationError("transition_s must be shorter than each dwell")
        rpm_points: Breakpoints = []
        power_points: Breakpoints = []
        for i, (rpm, power) in enumerate(levels):
            begin = i * dwell + (transition_s if i else 0.0)
            rpm_points += [(begin, rpm), ((i + 1) * dwell, rpm)]
            power_points += [(begin, power), ((i + 1) * dwell, power)]
        return cls(
            duration_s=duration_s,
            step_s=step_s,
            rpm_points=rpm_points,
            power_points=power_points,
            shape="staircase",
        )


def _interpolate(points: Breakpoints, t: np.ndarray) -> np.ndarray:
    xs = np.array([p[0] for p in points], dtype=float)
    ys = np.array([p[1] for p in points], dtype=float)
    return np.interp(t, xs, ys)


class SensorModel(BaseModel):
    """Healthy response of one channel: a quadratic map of (rpm, power) plus noise.

    ``y_h = const + rpm*r + power*p + rpm_sq*r^2 + power_sq*p^2 + rpm_power*r*p``
    ``      + ripple_amplitude * sin(2 pi r / ripple_period_rpm)``

    The ripple stands in for speed-dependent resonances of the real hardware.
    """

    channel_id: str = Field(min_length=1)
    units: str = ""
    const: float = 0.0
    rpm: float = 0.0
    power: float = 0.0
    rpm_sq: float = 0.0
    power_sq: float = 0.0
    rpm_power: float = 0.0
    ripple_amplitude: float = 0.0
    ripple_period_rpm: float = Field(default=30.0, gt=0)
    noise_std: float = Field(default=0.0, ge=0)

    @field_validator("channel_id")
    @classmethod
    def _check_name(cls, name: str) -> str:
        if name in ("t",) + INPUT_COLUMNS or name == "origin":
            raise ValueError(f"'{name}' is reserved for a non-sensor column")
        return name

    def base_value(self, rpm: np.ndarray, power: np.ndarray) -> np.ndarray:
        rpm = np.asarray(rpm, dtype=float)
        power = np.asarray(power, dtype=float)
        return (
            self.const
            + self.rpm * rpm
            + self.power * power
            + self.rpm_sq * rpm**2
            + self.power_sq * power**2
            + self.rpm_power * rpm * power
            + self.ripple_amplitude * np.sin(2 * np.pi * rpm / self.ripple_period_rpm)
        )


class FaultKind(str, Enum):
    ADDITIVE_AGEING = "additive_ageing"
    MULTIPLICATIVE_AGEING = "multiplicative_ageing"
    CATASTROPHIC_STEP = "catastrophic_step"


class FaultSpec(BaseModel):
    """Parametric failure model ``y_f = y_h + k(t)`` or ``y_f = y_h * k(t)``.

    For ageing kinds ``k`` ramps linearly from its neutral value (0 additive,
    1 multiplicative) at ``onset_s`` to ``magnitude`` at ``end_s`` (default:
    end of run). For catastrophic steps ``k`` is 0 before ``onset_s`` and
    ``magnitude`` afterwards, optionally reached over ``ramp_s`` seconds;
    ``mode`` says whether ``k`` is a channel-unit offset or a fractional change.
    """

    kind: FaultKind
    target_channels: List[str] = Field(min_length=1)
    onset_s: float = Field(ge=0)
    magnitude: float
    mode: Literal["offset", "relative"] = "offset"
    ramp_s: float = Field(default=0.0, ge=0)
    end_s: Optional[float] = None

    @model_validator(mode="after")
    def _check_window(self) -> "FaultSpec":
        if self.end_s is not None and self.end_s < self.onset_s:
            raise ValueError("end_s must not precede onset_s")
        return self

    def coefficient(self, t: np.ndarray, run_end_s: float) -> np.ndarray:
        """k(t) evaluated on the sample times ``t``."""
        t = np.asarray(t, dtype=float)
        if self.kind is FaultKind.CATASTROPHIC_STEP:
            if self.ramp_s > 0:
                progress = np.clip((t - self.onset_s) / self.ramp_s, 0.0, 1.0)
                return np.where(t >= self.onset_s, self.magnitude * progress, 0.0)
            return np.where(t >= self.onset_s, self.magnitude, 0.0)

        end = run_end_s if self.end_s is None else self.end_s
        if end > self.onset_s:
            progress = np.clip((t - self.onset_s) / (end - self.onset_s), 0.0, 1.0)
        else:
            progress = (t >= self.onset_s).astype(float)
        if self.kind is FaultKind.ADDITIVE_AGEING:
            return self.magnitude * progress
        return 1.0 + (self.magnitude - 1.0) * progress

    def apply(self, y: np.ndarray, k: np.ndarray) -> np.ndarray:
        if self.kind is FaultKind.MULTIPLICATIVE_AGEING:
            return y * k
        if self.kind is FaultKind.CATASTROPHIC_STEP and self.mode == "relative":
            return y * (1.0 + k)
        return y + k


def generate_profile(
    profile: LoadProfile, sensors: Sequence[SensorModel], seed: int
) -> Telemetry:
    """Sample the load profile and every sensor map with independent noise."""
    if not sensors:
        raise SimulationError("at least one sensor is required")
    names = [s.channel_id for s in sensors]
    if len(set(names)) != len(names):
        raise SimulationError(f"duplicate channel ids in {names}")

    rng = np.random.default_rng(seed)
    t = profile.times()
    rpm = profile.rpm_at(t)
    power = profile.power_at(t)

    columns = []
    for sensor in sensors:
        y = sensor.base_value(rpm, power)
        if sensor.noise_std > 0:
            y = y + rng.normal(0.0, sensor.noise_std, size=len(t))
        columns.append(y)

    measured_rpm, measured_power = rpm, power
    if profile.rpm_noise > 0:
        measured_rpm = rpm + rng.normal(0.0, profile.rpm_noise, size=len(t))
    if profile.power_noise > 0:
        measured_power = power + rng.normal(0.0, profile.power_noise, size=len(t))

    logger.debug(
        f"Generated {len(t)} frames ({profile.shape}) for {len(sensors)} channels"
    )
    return Telemetry(
        t=t,
        rpm=measured_rpm,
        power=measured_power,
        values=np.column_stack(columns),
        channels=tuple(names),
        step_s=profile.step_s,
    )


def inject_fault(telemetry: Telemetry, fault: FaultSpec) -> Telemetry:
    """Layer a fault onto its target channels; other channels are untouched."""
    missing = [c for c in fault.target_channels if c not in telemetry.channels]
    if missing:
        raise SimulationError(f"fault targets unknown channel(s) {missing}")
    if len(telemetry) == 0 or fault.onset_s > telemetry.t[-1]:
        raise SimulationError(
            f"fault onset {fault.onset_s}s lies beyond the sequence "
            f"(last sample at {telemetry.t[-1] if len(telemetry) else 'n/a'}s)"
        )

    k = fault.coefficient(telemetry.t, run_end_s=float(telemetry.t[-1]))
    if fault.kind is FaultKind.CATASTROPHIC_STEP:
        rows = telemetry.t >= fault.onset_s
    else:
        rows = np.ones(len(telemetry), dtype=bool)

    values = telemetry.values.copy()
    for name in fault.target_channels:
        col = telemetry.channels.index(name)
        values[rows, col] = fault.apply(values[rows, col], k[rows])

    logger.debug(
        f"Injected {fault.kind.value} into {fault.target_channels} "
        f"from t={fault.onset_s}s"
    )
    return telemetry.with_values(values)


class SimulationRecord(BaseModel):
    """JSON sidecar describing how a telemetry CSV was produced."""

    profile: LoadProfile
    sensors: List[SensorModel]
    fault: Optional[FaultSpec] = None
    seed: int


def write_run(
    telemetry: Telemetry, path: Union[str, Path], record: SimulationRecord
) -> Path:
    """Write the CSV plus a ``.json`` sidecar with the generating specs."""
    path = write_telemetry_csv(telemetry, path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(record.model_dump(mode="json"), indent=2) + "\n")
    logger.info(f"Wrote simulated run to {path} (sidecar {sidecar.name})")
    return path


def default_profile(duration_s: float = 20000.0, step_s: float = 1.0) -> LoadProfile:
    """One slow sweep up and back down across the engine's operating range."""
    return LoadProfile.ramp(
        duration_s=duration_s,
        rpm_range=(600.0, 1800.0),
        power_range=(400.0, 4000.0),
        step_s=step_s,
        hold_fraction=0.1,
        cycles=1,
    )


def default_sensors() -> List[SensorModel]:
    """Channels mimicking the variables monitored on a large marine diesel."""
    return [
        SensorModel(
            channel_id="water_pump_pressure",
            units="bar",
            const=1.5,
            rpm=1.0e-3,
            power=1.0e-4,
            ripple_amplitude=0.014,
            noise_std=0.02,
        ),
        SensorModel(
            channel_id="fuel_pressure",
            units="bar",
            const=5.0,
            rpm=1.5e-3,
            power=2.0e-4,
            ripple_amplitude=0.035,
            noise_std=0.05,
        ),
        SensorModel(
            channel_id="injected_fuel",
            units="mg/stroke",
            const=80.0,
            power=0.2,
            ripple_amplitude=3.5,
            noise_std=5.0,
        ),
        SensorModel(
            channel_id="oil_mist",
            units="mg/l",
            const=0.05,
            rpm=2.0e-5,
            power=5.0e-6,
            ripple_amplitude=7.0e-4,
            noise_std=1.0e-3,
        ),
        SensorModel(
            channel_id="rail_pressure",
            units="bar",
            const=600.0,
            rpm=0.3,
            power=0.1,
            ripple_amplitude=5.6,
            noise_std=8.0,
        ),
        SensorModel(
            channel_id="turbo_speed",
            units="rpm",
            const=8000.0,
            rpm=4.0,
            power=5.0,
            power_sq=5.0e-4,
            ripple_amplitude=140.0,
            noise_std=200.0,
        ),
        SensorModel(
            channel_id="lube_oil_temperature",
            units="degC",
            const=60.0,
            rpm=5.0e-3,
            power=2.0e-3,
            noise_std=0.3,
        ),
        SensorModel(
            channel_id="coolant_temperature",
            units="degC",
            const=70.0,
            rpm=3.0e-3,
            power=1.0e-3,
            noise_std=0.2,
        ),
    ]
