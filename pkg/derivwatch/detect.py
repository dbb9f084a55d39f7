"""Deviation and derivative early-warning detection.

For every monitored channel the measured value ``y`` is compared with the
healthy-behaviour prediction ``y_hat``:

    e = (y - y_hat) / y_hat          relative deviation
    e_smooth = trailing mean of e    same causal window as pre-processing
    v = forward difference of e_smooth / step_s
    a = forward difference of v / step_s

A derivative alarm fires when ``|v|`` or ``|a|`` exceeds the maximum seen on a
healthy calibration run (times a margin); the conventional alarm fires when
``|e_smooth|`` exceeds a fixed fraction, 5% by default. ``v`` built from
frames (t, t+1) is attributed to frame t+1 and ``a`` to frame t+2, so every
decision at frame t uses only frames up to t.
"""

import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import DataError, DetectionError
from .models import RegressorModel, predict
from .telemetry import FLOAT_FORMAT, Telemetry, TimeSeriesFrame

logger = logging.getLogger(__name__)

DEVIATION_GUARD = 1e-9
DEFAULT_FLOOR = 1e-6
SHUTDOWN_ACTION = "switch off the engine"
WARNING_ACTION = "inspect the engine"

RULE_DEVIATION = "deviation_5pct"
RULE_FIRST = "first_derivative"
RULE_SECOND = "second_derivative"
RULE_COMBINED = "combined"
RULES = (RULE_DEVIATION, RULE_FIRST, RULE_SECOND, RULE_COMBINED)


def deviation(y, y_hat, guard: float = DEVIATION_GUARD):
    """Relative deviation ``(y - y_hat) / y_hat``; NaN where ``|y_hat| < guard``."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    indeterminate = np.abs(y_hat) < guard
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.where(indeterminate, np.nan, (y - y_hat) / y_hat)
    return float(e) if e.ndim == 0 else e


def derivative(stream: Sequence[float], step_s: float) -> np.ndarray:
    """Forward difference ``(s[t+1] - s[t]) / step_s``; one sample shorter."""
    stream = np.asarray(stream, dtype=float)
    if step_s <= 0:
        raise DetectionError(f"step_s must be > 0, got {step_s}")
    if len(stream) < 2:
        raise DetectionError(
            f"derivative needs at least 2 samples, got {len(stream)}"
        )
    return np.diff(stream, axis=0) / step_s


def _calibration_date() -> str:
    epoch = os.getenv("SOURCE_DATE_EPOCH")
    if epoch:
        stamp = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    else:
        stamp = datetime.now(timezone.utc)
    return stamp.date().isoformat()


class ThresholdSet(BaseModel):
    """Per-channel alarm thresholds plus where they came from."""

    channels: List[str]
    v_threshold: Dict[str, float]
    a_threshold: Dict[str, float]
    deviation_threshold: Dict[str, float]
    margin: float = 1.0
    window: int = 300
    warmup_samples: int = 300
    step_s: float = 1.0
    floor: float = DEFAULT_FLOOR
    degenerate: List[str] = Field(default_factory=list)
    profile_digest: str
    calibrated_on: str

    @model_validator(mode="after")
    def check_thresholds(self) -> "ThresholdSet":
        for name, table in (
            ("v_threshold", self.v_threshold),
            ("a_threshold", self.a_threshold),
            ("deviation_threshold", self.deviation_threshold),
        ):
            missing = [c for c in self.channels if c not in table]
            if missing:
                raise ValueError(f"{name} is missing channel(s) {missing}")
            bad = {c: v for c, v in table.items() if not v > 0}
            if bad:
                raise ValueError(f"{name} must be > 0, got {bad}")
        if not self.profile_digest:
            raise ValueError("profile_digest is required")
        return self

    def vectors(
        self, channels: Sequence[str]
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.array([self.v_threshold[c] for c in channels]),
            np.array([self.a_threshold[c] for c in channels]),
            np.array([self.deviation_threshold[c] for c in channels]),
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ThresholdSet":
        path = Path(path)
        if not path.exists():
            raise DetectionError(f"threshold file not found: {path}")
        try:
            return cls.model_validate_json(path.read_text())
        except ValidationError as e:
            raise DataError(f"{path}: not a valid threshold file: {e}") from e


@dataclass(frozen=True, eq=False)
class DeviationState:
    """The E, V and A matrices of one run (rows are samples, columns channels).

    ``v`` is one row shorter than ``e`` and ``a`` two rows shorter.
    """

    channels: Tuple[str, ...]
    t: np.ndarray
    y: np.ndarray
    y_hat: np.ndarray
    e: np.ndarray
    e_smooth: np.ndarray
    v: np.ndarray
    a: np.ndarray
    step_s: float
    window: int

    def __len__(self) -> int:
        return len(self.t)

    def aligned(self) -> Tuple[np.ndarray, np.ndarray]:
        """``v`` and ``a`` padded with NaN so row k belongs to frame k."""
        n, c = self.e.shape
        v = np.full((n, c), np.nan)
        a = np.full((n, c), np.nan)
        v[1:] = self.v
        a[2:] = self.a
        return v, a

    def indeterminate(self) -> np.ndarray:
        return np.isnan(self.e)


class TrailingMean:
    """Causal mean over the last ``window`` defined samples, fed in chunks.

    Holds at most ``window`` rows between calls. The running sum is advanced
    one row at a time, so the output never depends on how the stream was
    chunked. NaN samples are skipped by the mean and stay NaN in the output.
    """

    def __init__(self, window: int, n_channels: int):
        if int(window) != window or window < 1:
            raise DetectionError(f"window must be a positive integer, got {window}")
        self.window = int(window)
        self._tail = np.zeros((0, n_channels))
        self._tail_ok = np.zeros((0, n_channels), dtype=bool)
        self._sum = np.zeros(n_channels)
        self._count = np.zeros(n_channels, dtype=int)

    @property
    def buffered(self) -> int:
        return len(self._tail)

    def push(self, e: np.ndarray) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        n = len(e)
        if n == 0:
            return e.copy()
        ok = ~np.isnan(e)
        values = np.where(ok, e, 0.0)
        history = np.vstack([self._tail, values])
        history_ok = np.vstack([self._tail_ok, ok])

        leaving = np.arange(len(self._tail), len(self._tail) + n) - self.window
        present = (leaving >= 0)[:, None]
        rows = np.clip(leaving, 0, None)
        old = np.where(present, history[rows], 0.0)
        old_ok = present & history_ok[rows]

        sums = np.add.accumulate(np.vstack([self._sum, values - old]), axis=0)[1:]
        counts = self._count + np.cumsum(ok.astype(int) - old_ok.astype(int), axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            mean = np.where(ok & (counts > 0), sums / counts, np.nan)

        self._sum = sums[-1]
        self._count = counts[-1]
        self._tail = history[-self.window :]
        self._tail_ok = history_ok[-self.window :]
        return mean


def compute_state(
    y: np.ndarray,
    y_hat: np.ndarray,
    t: np.ndarray,
    channels: Sequence[str],
    step_s: float,
    window: int,
) -> DeviationState:
    """Deviation, smoothed deviation and both derivatives for a whole run."""
    y = np.asarray(y, dtype=float).reshape(len(t), -1)
    y_hat = np.asarray(y_hat, dtype=float).reshape(y.shape)
    e = deviation(y, y_hat)
    e_smooth = TrailingMean(window, y.shape[1]).push(e)
    v = np.diff(e_smooth, axis=0) / step_s
    a = np.diff(v, axis=0) / step_s
    return DeviationState(
        channels=tuple(channels),
        t=np.asarray(t, dtype=float),
        y=y,
        y_hat=y_hat,
        e=e,
        e_smooth=e_smooth,
        v=v,
        a=a,
        step_s=step_s,
        window=window,
    )


def _as_telemetry(
    data: Union[Telemetry, Iterable[TimeSeriesFrame]], step_s: float
) -> Telemetry:
    if isinstance(data, Telemetry):
        return data
    return Telemetry.from_frames(data, step_s=step_s)


def state_for(
    model: RegressorModel,
    data: Union[Telemetry, Iterable[TimeSeriesFrame]],
    window: int,
    step_s: Optional[float] = None,
) -> DeviationState:
    """Predict the healthy values for ``data`` and build its deviation state."""
    telemetry = _as_telemetry(data, step_s or 1.0)
    if len(telemetry) == 0:
        raise DetectionError("no frames to process")
    channels = tuple(model.channels)
    missing = [c for c in channels if c not in telemetry.channels]
    if missing:
        raise DetectionError(
            f"model channels {missing} are not present in the telemetry "
            f"(has {list(telemetry.channels)})"
        )
    step = step_s or telemetry.step_s
    y = telemetry.select(channels).values
    y_hat = predict(model, telemetry.inputs)
    return compute_state(y, y_hat, telemetry.t, channels, step, window)


def _max_abs(values: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Column-wise max of |values| over ``rows``; NaN for all-NaN columns."""
    selected = np.abs(values[rows])
    defined = ~np.all(np.isnan(selected), axis=0)
    out = np.full(selected.shape[1], np.nan)
    out[defined] = np.nanmax(selected[:, defined], axis=0)
    return out


def thresholds_from_state(
    state: DeviationState,
    margin: float = 1.0,
    warmup_samples: Optional[int] = None,
    deviation_threshold: float = 0.05,
    floor: float = DEFAULT_FLOOR,
    profile_digest: str = "",
) -> ThresholdSet:
    """Thresholds as ``margin`` times the largest healthy ``|v|`` and ``|a|``."""
    if margin <= 0:
        raise DetectionError(f"margin must be > 0, got {margin}")
    warmup = state.window if warmup_samples is None else warmup_samples
    v, a = state.aligned()
    rows = np.arange(len(state)) >= warmup
    if not rows.any():
        raise DetectionError(
            f"calibration profile of {len(state)} samples is shorter than the "
            f"{warmup}-sample warm-up"
        )
    v_max = _max_abs(v, rows)
    a_max = _max_abs(a, rows)
    v_thr: Dict[str, float] = {}
    a_thr: Dict[str, float] = {}
    degenerate: List[str] = []
    for i, name in enumerate(state.channels):
        if np.isnan(v_max[i]) or np.isnan(a_max[i]):
            raise DetectionError(
                f"channel {name} is indeterminate over the whole calibration profile"
            )
        v_thr[name] = margin * float(v_max[i])
        a_thr[name] = margin * float(a_max[i])
        if v_thr[name] < floor or a_thr[name] < floor:
            degenerate.append(name)
            logger.warning(
                f"Degenerate thresholds for {name} "
                f"(v={v_thr[name]:.3g}, a={a_thr[name]:.3g}); applying floor {floor}"
            )
            v_thr[name] = max(v_thr[name], floor)
            a_thr[name] = max(a_thr[name], floor)
        logger.debug(
            f"Threshold {name}: v={v_thr[name]:.6g}/s, a={a_thr[name]:.6g}/s^2"
        )
    return ThresholdSet(
        channels=list(state.channels),
        v_threshold=v_thr,
        a_threshold=a_thr,
        deviation_threshold={c: deviation_threshold for c in state.channels},
        margin=margin,
        window=state.window,
        warmup_samples=warmup,
        step_s=state.step_s,
        floor=floor,
        degenerate=degenerate,
        profile_digest=profile_digest or "unknown",
        calibrated_on=_calibration_date(),
    )


def calibrate(
    model: RegressorModel,
    healthy_profile: Union[Telemetry, Iterable[TimeSeriesFrame]],
    window: int = 300,
    margin: float = 1.0,
    warmup_samples: Optional[int] = None,
    deviation_threshold: float = 0.05,
    floor: float = DEFAULT_FLOOR,
) -> ThresholdSet:
    """Run the detection pipeline on a fault-free profile and record its maxima."""
    telemetry = _as_telemetry(healthy_profile, 1.0)
    if len(telemetry) < 3:
        raise DetectionError(
            f"calibration needs at least 3 frames, got {len(telemetry)}"
        )
    state = state_for(model, telemetry, window)
    thresholds = thresholds_from_state(
        state,
        margin=margin,
        warmup_samples=warmup_samples,
        deviation_threshold=deviation_threshold,
        floor=floor,
        profile_digest=telemetry.digest(),
    )
    logger.info(
        f"Calibrated thresholds for {len(state.channels)} channel(s) on "
        f"{len(state)} healthy samples (margin {margin})"
    )
    return thresholds


class DetectionReport(BaseModel):
    """First crossings per rule and channel, and what they imply.

    When the fault onset is known, crossings before it are listed in
    ``false_alarms`` and the first ones at or after it in
    ``onset_detections``; the lead time is then taken from the latter.
    """

    channels: List[str]
    n_frames: int
    confirm_samples: int = 1
    crossings: Dict[str, Dict[str, Optional[int]]]
    detections: Dict[str, Optional[int]]
    detection_times: Dict[str, Optional[float]]
    first_channel: Dict[str, Optional[str]]
    lead_time_samples: Optional[int] = None
    alarm: Optional[str] = None
    action: Optional[str] = None
    indeterminate_samples: Dict[str, int] = Field(default_factory=dict)
    onset: Optional[int] = None
    onset_detections: Dict[str, Optional[int]] = Field(default_factory=dict)
    false_alarms: Dict[str, Optional[int]] = Field(default_factory=dict)

    @property
    def derivative_alarm(self) -> bool:
        return self.detections.get(RULE_COMBINED) is not None

    @property
    def deviation_alarm(self) -> bool:
        return self.detections.get(RULE_DEVIATION) is not None

    @property
    def false_alarm(self) -> bool:
        return any(frame is not None for frame in self.false_alarms.values())

    def detection(self, rule: str) -> Optional[int]:
        """Onset-aware detection frame for ``rule`` when the onset is known."""
        if self.onset is not None:
            return self.onset_detections.get(rule)
        return self.detections.get(rule)


CrossingTable = Dict[str, Dict[str, Optional[int]]]

HISTORY_KEYS = ("t", "y", "y_hat", "e", "e_smooth", "v", "a")


def _run_lengths(hits: np.ndarray, carry: np.ndarray) -> np.ndarray:
    """Length of the run of consecutive hits ending at every row."""
    pos = np.arange(1, len(hits) + 1)[:, None]
    last_miss = np.maximum.accumulate(np.where(hits, 0, pos), axis=0)
    return np.where(last_miss == 0, carry + pos, pos - last_miss)


def _earliest(
    table: CrossingTable,
) -> Tuple[Dict[str, Optional[int]], Dict[str, Optional[str]]]:
    detections: Dict[str, Optional[int]] = {}
    first_channel: Dict[str, Optional[str]] = {}
    for rule in RULES:
        found = [(f, c) for c, f in table[rule].items() if f is not None]
        frame, channel = min(found) if found else (None, None)
        detections[rule] = frame
        first_channel[rule] = channel
    return detections, first_channel


class EngineMonitor:
    """Stateful detector for one engine stream, fed in chunks of frames.

    Between chunks only the smoothing window, the last smoothed deviation,
    the last first derivative and the current crossing runs are kept, so the
    work per chunk is proportional to the chunk. ``keep_history`` also
    records every frame so the run can be exported as traces. Decisions for
    frames already seen never change when more frames arrive.
    """

    def __init__(
        self,
        model: RegressorModel,
        thresholds: ThresholdSet,
        window: Optional[int] = None,
        warmup_samples: Optional[int] = None,
        confirm_samples: int = 1,
        onset: Optional[int] = None,
        keep_history: bool = False,
    ):
        channels = list(model.channels)
        if channels != list(thresholds.channels):
            raise DetectionError(
                f"model channels {channels} do not match threshold channels "
                f"{thresholds.channels}"
            )
        if confirm_samples < 1:
            raise DetectionError(f"confirm_samples must be >= 1, got {confirm_samples}")
        if onset is not None and onset < 0:
            raise DetectionError(f"onset must be >= 0, got {onset}")
        self.model = model
        self.thresholds = thresholds
        self.channels = tuple(channels)
        self.window = window or thresholds.window
        self.warmup_samples = (
            thresholds.warmup_samples if warmup_samples is None else warmup_samples
        )
        self.confirm_samples = confirm_samples
        self.onset = onset
        self.keep_history = keep_history
        self.step_s = thresholds.step_s

        n = len(self.channels)
        self._smoother = TrailingMean(self.window, n)
        self._last_smooth = np.full(n, np.nan)
        self._last_v = np.full(n, np.nan)
        self._runs = {rule: np.zeros(n, dtype=int) for rule in RULES[:3]}
        self._n = 0
        self._indeterminate = np.zeros(n, dtype=int)
        self._crossings: CrossingTable = {
            rule: {c: None for c in self.channels} for rule in RULES
        }
        self._onset_crossings: CrossingTable = {
            rule: {c: None for c in self.channels} for rule in RULES
        }
        self._times: Dict[int, float] = {}
        self._history: Dict[str, List[np.ndarray]] = {k: [] for k in HISTORY_KEYS}

    @property
    def n_frames(self) -> int:
        return self._n

    @property
    def buffered_samples(self) -> int:
        """Rows held for smoothing between chunks; never more than the window."""
        return self._smoother.buffered

    @property
    def state(self) -> DeviationState:
        if self._n == 0:
            raise DetectionError("no frames processed yet")
        if not self.keep_history:
            raise DetectionError("monitor was created without keep_history")
        t, y, y_hat, e, e_smooth, v, a = (
            np.concatenate(self._history[key]) for key in HISTORY_KEYS
        )
        return DeviationState(
            channels=self.channels,
            t=t,
            y=y,
            y_hat=y_hat,
            e=e,
            e_smooth=e_smooth,
            v=v[1:],
            a=a[2:],
            step_s=self.step_s,
            window=self.window,
        )

    def update(
        self, data: Union[Telemetry, Iterable[TimeSeriesFrame]]
    ) -> List[Tuple[int, str, str]]:
        """Process the next chunk; returns newly raised ``(frame, rule, channel)``."""
        telemetry = _as_telemetry(data, self.step_s)
        if len(telemetry) == 0:
            return []
        if not np.isclose(telemetry.step_s, self.step_s):
            logger.warning(
                f"Telemetry sample period {telemetry.step_s}s differs from the "
                f"calibration period {self.step_s}s"
            )
        missing = [c for c in self.channels if c not in telemetry.channels]
        if missing:
            raise DetectionError(
                f"telemetry is missing model channel(s) {missing}"
            )
        t = np.array(telemetry.t, dtype=float)
        y = np.array(telemetry.select(self.channels).values)
        y_hat = np.asarray(predict(self.model, telemetry.inputs), dtype=float)
        y_hat = y_hat.reshape(y.shape)
        e = deviation(y, y_hat)
        e_smooth = self._smoother.push(e)
        v = np.diff(np.vstack([self._last_smooth, e_smooth]), axis=0) / self.step_s
        a = np.diff(np.vstack([self._last_v, v]), axis=0) / self.step_s
        self._last_smooth = e_smooth[-1]
        self._last_v = v[-1]

        frames = self._n + np.arange(len(t))
        self._n += len(t)
        self._indeterminate += np.isnan(e).sum(axis=0)
        if self.keep_history:
            for key, values in zip(HISTORY_KEYS, (t, y, y_hat, e, e_smooth, v, a)):
                self._history[key].append(values)
        signals = {RULE_DEVIATION: e_smooth, RULE_FIRST: v, RULE_SECOND: a}
        return self._scan(frames, t, signals)

    def _scan(
        self, frames: np.ndarray, t: np.ndarray, signals: Dict[str, np.ndarray]
    ) -> List[Tuple[int, str, str]]:
        v_thr, a_thr, dev_thr = self.thresholds.vectors(self.channels)
        limits = {RULE_DEVIATION: dev_thr, RULE_FIRST: v_thr, RULE_SECOND: a_thr}
        armed = (frames >= self.warmup_samples)[:, None]
        raised: List[Tuple[int, str, str]] = []
        for rule, signal in signals.items():
            with np.errstate(invalid="ignore"):
                hits = armed & (np.abs(signal) > limits[rule])
            runs = _run_lengths(hits, self._runs[rule])
            self._runs[rule] = runs[-1]
            confirmed = runs >= self.confirm_samples
            for i, channel in enumerate(self.channels):
                rows = np.flatnonzero(confirmed[:, i])
                if len(rows) == 0:
                    continue
                if self._crossings[rule][channel] is None:
                    frame = int(frames[rows[0]])
                    self._crossings[rule][channel] = frame
                    self._times[frame] = float(t[rows[0]])
                    raised.append((frame, rule, channel))
                if (
                    self.onset is not None
                    and self._onset_crossings[rule][channel] is None
                ):
                    late = rows[frames[rows] >= self.onset]
                    if len(late):
                        self._onset_crossings[rule][channel] = int(frames[late[0]])
        for frame, channel in self._combine(self._crossings):
            raised.append((frame, RULE_COMBINED, channel))
        self._combine(self._onset_crossings)
        for frame, rule, channel in sorted(raised):
            log = logger.warning if rule != RULE_DEVIATION else logger.info
            log(f"{rule} alarm on {channel} at frame {frame}")
        return sorted(raised)

    def _combine(self, table: CrossingTable) -> List[Tuple[int, str]]:
        """Combined rule: the earlier of the first- and second-derivative crossings."""
        new: List[Tuple[int, str]] = []
        for channel in self.channels:
            pair = (table[RULE_FIRST][channel], table[RULE_SECOND][channel])
            found = [f for f in pair if f is not None]
            if found and table[RULE_COMBINED][channel] is None:
                table[RULE_COMBINED][channel] = min(found)
                new.append((min(found), channel))
        return new

    def report(self) -> DetectionReport:
        if self._n == 0:
            raise DetectionError("no frames processed yet")
        detections, first_channel = _earliest(self._crossings)
        onset_detections: Dict[str, Optional[int]] = {}
        false_alarms: Dict[str, Optional[int]] = {}
        basis = detections
        if self.onset is not None:
            onset_detections, _ = _earliest(self._onset_crossings)
            false_alarms = {
                rule: frame if frame is not None and frame < self.onset else None
                for rule, frame in detections.items()
            }
            basis = onset_detections
        dev, comb = basis[RULE_DEVIATION], basis[RULE_COMBINED]
        lead_time = dev - comb if dev is not None and comb is not None else None
        if detections[RULE_COMBINED] is not None:
            alarm, action = "derivative", SHUTDOWN_ACTION
        elif detections[RULE_DEVIATION] is not None:
            alarm, action = "deviation", WARNING_ACTION
        else:
            alarm, action = None, None
        return DetectionReport(
            channels=list(self.channels),
            n_frames=self._n,
            confirm_samples=self.confirm_samples,
            crossings={rule: dict(table) for rule, table in self._crossings.items()},
            detections=detections,
            detection_times={
                rule: self._times[f] if f is not None else None
                for rule, f in detections.items()
            },
            first_channel=first_channel,
            lead_time_samples=lead_time,
            alarm=alarm,
            action=action,
            indeterminate_samples={
                c: int(n) for c, n in zip(self.channels, self._indeterminate)
            },
            onset=self.onset,
            onset_detections=onset_detections,
            false_alarms=false_alarms,
        )


def run_detector(
    model: RegressorModel,
    frames: Union[Telemetry, Iterable[TimeSeriesFrame]],
    thresholds: ThresholdSet,
    window: Optional[int] = None,
    warmup_samples: Optional[int] = None,
    confirm_samples: int = 1,
    onset: Optional[int] = None,
) -> Tuple[DetectionReport, DeviationState]:
    """Process a whole run at once and return its report and deviation state."""
    monitor = EngineMonitor(
        model,
        thresholds,
        window,
        warmup_samples,
        confirm_samples,
        onset=onset,
        keep_history=True,
    )
    telemetry = _as_telemetry(frames, thresholds.step_s)
    if len(telemetry) < 3:
        raise DetectionError(f"detection needs at least 3 frames, got {len(telemetry)}")
    monitor.update(telemetry)
    report = monitor.report()
    logger.info(
        f"Detection over {report.n_frames} frames: alarm={report.alarm}, "
        f"derivative at {report.detections[RULE_COMBINED]}, "
        f"deviation at {report.detections[RULE_DEVIATION]}"
    )
    if report.false_alarm:
        early = {r: f for r, f in report.false_alarms.items() if f is not None}
        logger.warning(f"Alarm(s) before the fault onset at frame {onset}: {early}")
    return report, monitor.state


def export_traces(
    state: DeviationState,
    report: DetectionReport,
    path: Union[str, Path],
) -> List[Path]:
    """One ``<channel>.csv`` per channel plus ``detection.json`` under ``path``."""
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DetectionError(f"cannot create trace directory {directory}: {e}") from e
    v, a = state.aligned()
    written: List[Path] = []
    for i, channel in enumerate(state.channels):
        frame = pd.DataFrame(
            {
                "t": state.t,
                "y": state.y[:, i],
                "y_hat": state.y_hat[:, i],
                "e": state.e[:, i],
                "e_smooth": state.e_smooth[:, i],
                "v": v[:, i],
                "a": a[:, i],
            }
        )
        target = directory / f"{channel}.csv"
        frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)
        written.append(target)
    report_path = directory / "detection.json"
    report_path.write_text(
        json.dumps(report.model_dump(), indent=2, sort_keys=True) + "\n"
    )
    written.append(report_path)
    logger.debug(f"Exported {len(state.channels)} trace file(s) to {directory}")
    return written
