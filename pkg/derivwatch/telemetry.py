"""Telemetry containers and their CSV representation.

A run of engine telemetry is kept column-wise (one numpy array per quantity)
because every downstream stage works on whole columns. ``TimeSeriesFrame`` is
the row view used when frames are consumed one at a time.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DataError

logger = logging.getLogger(__name__)

INPUT_COLUMNS = ("rpm", "power")
FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class TimeSeriesFrame:
    """One timestamped sample: operating inputs plus sensor channels."""

    t: float
    rpm: float
    power: float
    values: Dict[str, float] = field(default_factory=dict)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Telemetry:
    """A time-ordered run of frames stored as columns."""

    t: np.ndarray
    rpm: np.ndarray
    power: np.ndarray
    values: np.ndarray
    channels: Tuple[str, ...]
    step_s: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        n = len(self.t)
        if not (len(self.rpm) == len(self.power) == values.shape[0] == n):
            raise DataError(
                f"column lengths differ: t={n}, rpm={len(self.rpm)}, "
                f"power={len(self.power)}, values={values.shape[0]}"
            )
        if values.shape[1] != len(self.channels):
            raise DataError(
                f"{values.shape[1]} value columns but {len(self.channels)} channels"
            )
        if len(set(self.channels)) != len(self.channels):
            raise DataError(f"duplicate channel names in {list(self.channels)}")
        object.__setattr__(self, "t", _frozen(self.t))
        object.__setattr__(self, "rpm", _frozen(self.rpm))
        object.__setattr__(self, "power", _frozen(self.power))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "channels", tuple(self.channels))

    def __len__(self) -> int:
        return len(self.t)

    @property
    def inputs(self) -> np.ndarray:
        """Operating inputs as an (n, 2) matrix of (rpm, power)."""
        return np.column_stack([self.rpm, self.power])

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.channels.index(name)]
        except ValueError:
            raise DataError(f"unknown channel '{name}'") from None

    def frames(self) -> Iterator[TimeSeriesFrame]:
        for i in range(len(self)):
            yield TimeSeriesFrame(
                t=float(self.t[i]),
                rpm=float(self.rpm[i]),
                power=float(self.power[i]),
                values={c: float(v) for c, v in zip(self.channels, self.values[i])},
            )

    @classmethod
    def from_frames(
        cls, frames: Iterable[TimeSeriesFrame], step_s: float = 1.0
    ) -> "Telemetry":
        frames = list(frames)
        if not frames:
            raise DataError("no frames given")
        channels = tuple(frames[0].values)
        for frame in frames:
            if tuple(frame.values) != channels:
                raise DataError(f"frame at t={frame.t} has different channels")
        return cls(
            t=np.array([f.t for f in frames]),
            rpm=np.array([f.rpm for f in frames]),
            power=np.array([f.power for f in frames]),
            values=np.array([[f.values[c] for c in channels] for f in frames]),
            channels=channels,
            step_s=step_s,
        )

    def with_values(self, values: np.ndarray) -> "Telemetry":
        return Telemetry(
            t=self.t,
            rpm=self.rpm,
            power=self.power,
            values=values,
            channels=self.channels,
            step_s=self.step_s,
        )

    def select(self, channels: Sequence[str]) -> "Telemetry":
        """Project onto a subset of channels, in the given order."""
        columns = [self.channels.index(c) for c in self._check_channels(channels)]
        return Telemetry(
            t=self.t,
            rpm=self.rpm,
            power=self.power,
            values=self.values[:, columns],
            channels=tuple(channels),
            step_s=self.step_s,
        )

    def slice(self, start: int = 0, stop: Optional[int] = None) -> "Telemetry":
        return Telemetry(
            t=self.t[start:stop],
            rpm=self.rpm[start:stop],
            power=self.power[start:stop],
            values=self.values[start:stop],
            channels=self.channels,
            step_s=self.step_s,
        )

    def _check_channels(self, channels: Sequence[str]) -> Sequence[str]:
        missing = [c for c in channels if c not in self.channels]
        if missing:
            raise DataError(f"unknown channel(s) {missing}; have {list(self.channels)}")
        return channels

    def to_frame(self) -> pd.DataFrame:
        data = {"t": self.t, "rpm": self.rpm, "power": self.power}
        for i, name in enumerate(self.channels):
            data[name] = self.values[:, i]
        return pd.DataFrame(data)

    def digest(self) -> str:
        """SHA-256 over every column, used for provenance records."""
        h = hashlib.sha256()
        h.update(",".join(self.channels).encode())
        for array in (self.t, self.rpm, self.power, self.values):
            h.update(np.ascontiguousarray(array).tobytes())
        return h.hexdigest()


def write_telemetry_csv(telemetry: Telemetry, path: Union[str, Path]) -> Path:
    """Write ``t,rpm,power,<channel...>`` with round-trip float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    telemetry.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug(f"Wrote {len(telemetry)} frames to {path}")
    return path


def read_telemetry_csv(
    path: Union[str, Path], step_s: Optional[float] = None
) -> Telemetry:
    """Read a telemetry CSV; the sample period is inferred from ``t`` if omitted."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"telemetry file not found: {path}")
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in ("t",) + INPUT_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    channels = tuple(c for c in frame.columns if c not in ("t",) + INPUT_COLUMNS)
    if not channels:
        raise DataError(f"{path}: no sensor channels")
    t = frame["t"].to_numpy(dtype=float)
    if step_s is None:
        step_s = float(np.median(np.diff(t))) if len(t) > 1 else 1.0
    return Telemetry(
        t=t,
        rpm=frame["rpm"].to_numpy(dtype=float),
        power=frame["power"].to_numpy(dtype=float),
        values=frame[list(channels)].to_numpy(dtype=float),
        channels=channels,
        step_s=step_s,
    )
