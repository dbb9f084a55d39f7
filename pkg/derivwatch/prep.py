"""Pre-processing: cleaning, scaling, causal denoising, channel ranking, splits."""

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .errors import DataError, EmptyDatasetError, ScalerError
from .telemetry import FLOAT_FORMAT, INPUT_COLUMNS, Telemetry, TimeSeriesFrame

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ScalerParams:
    """Per-column mean/std (standardization) and min/max (normalization)."""

    columns: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray

    @classmethod
    def fit(cls, matrix: np.ndarray, columns: Sequence[str]) -> "ScalerParams":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim == 1:
            matrix = matrix.reshape(-1, 1)
        if matrix.shape[0] == 0:
            raise EmptyDatasetError("cannot fit scaler statistics on zero rows")
        return cls(
            columns=tuple(columns),
            mean=matrix.mean(axis=0),
            std=matrix.std(axis=0),
            min=matrix.min(axis=0),
            max=matrix.max(axis=0),
        )

    def with_unit_floor(self) -> "ScalerParams":
        """Copy where zero-spread columns get unit scale instead of failing."""
        flat = ~(self.std > 0)
        narrow = ~(self.max > self.min)
        for mask, what in ((flat, "standard deviation"), (narrow, "min-max span")):
            if mask.any():
                logger.warning(
                    f"Columns {[c for c, f in zip(self.columns, mask) if f]} have "
                    f"zero {what}; using unit scale"
                )
        return replace(
            self,
            std=np.where(flat, 1.0, self.std),
            max=np.where(narrow, self.min + 1.0, self.max),
        )

    def subset(self, columns: Sequence[str]) -> "ScalerParams":
        idx = [self.columns.index(c) for c in columns]
        return ScalerParams(
            columns=tuple(columns),
            mean=self.mean[idx],
            std=self.std[idx],
            min=self.min[idx],
            max=self.max[idx],
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            name: {
                "mean": float(self.mean[i]),
                "std": float(self.std[i]),
                "min": float(self.min[i]),
                "max": float(self.max[i]),
            }
            for i, name in enumerate(self.columns)
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, float]]) -> "ScalerParams":
        columns = tuple(data)
        return cls(
            columns=columns,
            mean=np.array([data[c]["mean"] for c in columns], dtype=float),
            std=np.array([data[c]["std"] for c in columns], dtype=float),
            min=np.array([data[c]["min"] for c in columns], dtype=float),
            max=np.array([data[c]["max"] for c in columns], dtype=float),
        )


def standardize(values: np.ndarray, params: ScalerParams) -> np.ndarray:
    """x_Z = (x - mu) / sigma, column-wise."""
    if np.any(params.std <= 0):
        raise ScalerError(f"zero standard deviation in columns {params.columns}")
    return (np.asarray(values, dtype=float) - params.mean) / params.std


def destandardize(values: np.ndarray, params: ScalerParams) -> np.ndarray:
    return np.asarray(values, dtype=float) * params.std + params.mean


def normalize(values: np.ndarray, params: ScalerParams) -> np.ndarray:
    """x_N = (x - min) / (max - min), column-wise."""
    span = params.max - params.min
    if np.any(span <= 0):
        raise ScalerError(f"max must exceed min in columns {params.columns}")
    return (np.asarray(values, dtype=float) - params.min) / span


def denormalize(values: np.ndarray, params: ScalerParams) -> np.ndarray:
    return np.asarray(values, dtype=float) * (params.max - params.min) + params.min


@dataclass(frozen=True, eq=False)
class Dataset:
    """Operating inputs X (rpm, power) against sensor targets Y.

    ``index`` keeps the original row number of every sample so partitions can
    be traced back; ``synthetic`` marks rows produced by augmentation.
    """

    X: np.ndarray
    Y: np.ndarray
    channels: Tuple[str, ...]
    index: np.ndarray
    t: np.ndarray
    synthetic: np.ndarray
    input_scaler: Optional[ScalerParams] = None
    target_scaler: Optional[ScalerParams] = None
    removed: int = 0

    def __post_init__(self):
        n = len(self.X)
        if len(self.Y) != n or len(self.index) != n or len(self.synthetic) != n:
            raise DataError("X, Y, index and origin must have equal row counts")
        if self.Y.ndim != 2 or self.Y.shape[1] != len(self.channels):
            raise DataError(f"Y has shape {self.Y.shape} for channels {self.channels}")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def input_names(self) -> Tuple[str, ...]:
        return INPUT_COLUMNS

    def rows(self, idx: np.ndarray) -> "Dataset":
        return replace(
            self,
            X=self.X[idx],
            Y=self.Y[idx],
            index=self.index[idx],
            t=self.t[idx],
            synthetic=self.synthetic[idx],
        )

    def fit_scalers(self) -> "Dataset":
        """Recompute scaler statistics from this dataset's own rows."""
        return replace(
            self,
            input_scaler=ScalerParams.fit(self.X, INPUT_COLUMNS),
            target_scaler=ScalerParams.fit(self.Y, self.channels),
        )

    def with_scalers(self, other: "Dataset") -> "Dataset":
        return replace(
            self, input_scaler=other.input_scaler, target_scaler=other.target_scaler
        )

    def select(self, channels: Sequence[str]) -> "Dataset":
        missing = [c for c in channels if c not in self.channels]
        if missing:
            raise DataError(f"unknown channel(s) {missing}")
        idx = [self.channels.index(c) for c in channels]
        return replace(
            self,
            Y=self.Y[:, idx],
            channels=tuple(channels),
            target_scaler=(
                self.target_scaler.subset(channels) if self.target_scaler else None
            ),
        )

    def concat(self, other: "Dataset") -> "Dataset":
        if other.channels != self.channels:
            raise DataError(
                f"cannot combine channels {other.channels} with {self.channels}"
            )
        return replace(
            self,
            X=np.vstack([self.X, other.X]),
            Y=np.vstack([self.Y, other.Y]),
            index=np.concatenate([self.index, other.index]),
            t=np.concatenate([self.t, other.t]),
            synthetic=np.concatenate([self.synthetic, other.synthetic]),
        )

    @property
    def matrix(self) -> np.ndarray:
        """Inputs and targets side by side, as augmentation sees them."""
        return np.hstack([self.X, self.Y])

    @property
    def columns(self) -> Tuple[str, ...]:
        return INPUT_COLUMNS + self.channels

    @classmethod
    def from_arrays(
        cls,
        X: np.ndarray,
        Y: np.ndarray,
        channels: Sequence[str],
        synthetic: bool = False,
        start_index: int = 0,
    ) -> "Dataset":
        X = np.asarray(X, dtype=float).reshape(-1, len(INPUT_COLUMNS))
        Y = np.asarray(Y, dtype=float).reshape(len(X), len(channels))
        return cls(
            X=X,
            Y=Y,
            channels=tuple(channels),
            index=np.arange(start_index, start_index + len(X)),
            t=np.full(len(X), np.nan),
            synthetic=np.full(len(X), synthetic, dtype=bool),
        )


def clean(
    data: Union[Telemetry, Dataset, Iterable[TimeSeriesFrame]],
    channels: Optional[Sequence[str]] = None,
) -> Dataset:
    """Drop every sample with a negative, non-finite or missing retained value."""
    if isinstance(data, Dataset):
        dataset = data.select(channels) if channels else data
    else:
        if not isinstance(data, Telemetry):
            data = Telemetry.from_frames(data)
        telemetry = data.select(channels) if channels else data
        if len(telemetry) == 0:
            raise DataError("no frames to clean")
        dataset = Dataset(
            X=telemetry.inputs,
            Y=np.array(telemetry.values),
            channels=telemetry.channels,
            index=np.arange(len(telemetry)),
            t=np.array(telemetry.t),
            synthetic=np.zeros(len(telemetry), dtype=bool),
        )

    matrix = dataset.matrix
    with np.errstate(invalid="ignore"):
        keep = np.all(np.isfinite(matrix) & (matrix >= 0), axis=1)
    removed = int(len(dataset) - keep.sum())
    if not keep.any():
        raise EmptyDatasetError(f"all {len(dataset)} samples were removed by cleaning")
    if removed:
        logger.info(f"Cleaning removed {removed} of {len(dataset)} samples")
    result = dataset.rows(np.flatnonzero(keep))
    return replace(result, removed=removed).fit_scalers()


def moving_average(series: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` samples (shorter at the start)."""
    if int(window) != window or window < 1:
        raise DataError(
            f"moving-average window must be a positive integer, got {window}"
        )
    values = np.asarray(series, dtype=float)
    if values.size == 0:
        return values.copy()
    frame = pd.DataFrame(values.reshape(len(values), -1))
    smoothed = frame.rolling(window=int(window), min_periods=1).mean().to_numpy()
    return smoothed.reshape(values.shape)


def denoise(dataset: Dataset, window: int) -> Dataset:
    """Smooth the targets of a time-ordered dataset with the causal average."""
    return replace(dataset, Y=moving_average(dataset.Y, window)).fit_scalers()


class VariableDeviation(BaseModel):
    """How far one channel's faulty mean moved from its healthy mean."""

    channel: str
    deviation_pct: Optional[float]
    selectable: bool = True
    selected: bool = False


def rank_variables(
    healthy: Dataset,
    faulty: Dataset,
    top_k: int = 8,
    min_deviation_pct: float = 2.0,
) -> List[VariableDeviation]:
    """Order channels by percentage deviation of the faulty from the healthy mean.

    A channel is selected when it is among the first ``top_k`` and deviates by
    at least ``min_deviation_pct``. Channels with a zero healthy mean cannot be
    expressed as a percentage and are reported last, unselectable.
    """
    if set(healthy.channels) != set(faulty.channels):
        raise DataError(
            f"channel sets differ: {healthy.channels} vs {faulty.channels}"
        )
    scored: List[VariableDeviation] = []
    unscored: List[VariableDeviation] = []
    for name in sorted(healthy.channels):
        mean_h = float(np.mean(healthy.Y[:, healthy.channels.index(name)]))
        mean_f = float(np.mean(faulty.Y[:, faulty.channels.index(name)]))
        if abs(mean_h) < 1e-12:
            logger.warning(f"Channel {name} has zero healthy mean; not selectable")
            unscored.append(
                VariableDeviation(channel=name, deviation_pct=None, selectable=False)
            )
            continue
        pct = 100.0 * abs(mean_f - mean_h) / abs(mean_h)
        scored.append(VariableDeviation(channel=name, deviation_pct=pct))

    scored.sort(key=lambda v: -v.deviation_pct)
    for rank, item in enumerate(scored):
        item.selected = rank < top_k and item.deviation_pct >= min_deviation_pct
    return scored + unscored


def selected_channels(ranking: Sequence[VariableDeviation]) -> List[str]:
    return [v.channel for v in ranking if v.selected]


def split(
    dataset: Dataset,
    train_fraction: float = 0.75,
    seed: int = 0,
    chronological: bool = False,
) -> Tuple[Dataset, Dataset]:
    """Row-disjoint train/test partition; scalers come from the training rows."""
    if not 0 < train_fraction < 1:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = math.ceil(round(train_fraction * n, 9))
    if n_train < 1 or n - n_train < 1:
        raise DataError(
            f"{n} samples are too few for a {train_fraction:.2f} split "
            "with a non-empty test partition"
        )
    if chronological:
        order = np.arange(n)
    else:
        order = np.random.default_rng(seed).permutation(n)
    train = dataset.rows(np.sort(order[:n_train])).fit_scalers()
    test = dataset.rows(np.sort(order[n_train:])).with_scalers(train)
    logger.debug(f"Split {n} samples into {len(train)} train / {len(test)} test")
    return train, test


def write_dataset_csv(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Write ``index,t,rpm,power,<channel...>,origin``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data: Dict[str, Any] = {"index": dataset.index, "t": dataset.t}
    for i, name in enumerate(INPUT_COLUMNS):
        data[name] = dataset.X[:, i]
    for i, name in enumerate(dataset.channels):
        data[name] = dataset.Y[:, i]
    data["origin"] = np.where(dataset.synthetic, "synthetic", "real")
    pd.DataFrame(data).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_dataset_csv(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    frame = pd.read_csv(path, float_precision="round_trip")
    reserved = {"index", "t", "origin"} | set(INPUT_COLUMNS)
    missing = [c for c in INPUT_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    channels = tuple(c for c in frame.columns if c not in reserved)
    n = len(frame)
    origin = frame["origin"] if "origin" in frame.columns else pd.Series(["real"] * n)
    dataset = Dataset(
        X=frame[list(INPUT_COLUMNS)].to_numpy(dtype=float),
        Y=frame[list(channels)].to_numpy(dtype=float),
        channels=channels,
        index=(
            frame["index"].to_numpy(dtype=int) if "index" in frame.columns
            else np.arange(n)
        ),
        t=(
            frame["t"].to_numpy(dtype=float) if "t" in frame.columns
            else np.full(n, np.nan)
        ),
        synthetic=(origin == "synthetic").to_numpy(),
    )
    if n == 0:
        raise EmptyDatasetError(f"{path}: no rows")
    return dataset.fit_scalers()


def write_scalers(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "inputs": dataset.input_scaler.to_dict() if dataset.input_scaler else {},
        "targets": dataset.target_scaler.to_dict() if dataset.target_scaler else {},
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def read_scalers(path: Union[str, Path]) -> Tuple[ScalerParams, ScalerParams]:
    payload = json.loads(Path(path).read_text())
    return (
        ScalerParams.from_dict(payload["inputs"]),
        ScalerParams.from_dict(payload["targets"]),
    )
