import json

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from derivwatch.detect import (
    DEFAULT_FLOOR,
    RULE_COMBINED,
    RULE_DEVIATION,
    RULE_FIRST,
    RULE_SECOND,
    SHUTDOWN_ACTION,
    WARNING_ACTION,
    EngineMonitor,
    ThresholdSet,
    TrailingMean,
    calibrate,
    compute_state,
    derivative,
    deviation,
    export_traces,
    run_detector,
    state_for,
    thresholds_from_state,
)
from derivwatch.errors import DataError, DetectionError
from derivwatch.prep import moving_average
from derivwatch.telemetry import Telemetry
from derivwatch.trees import DecisionTreeModel

N_FRAMES = 40
FAULT_FRAME = 20


def _run(y):
    y = np.asarray(y, dtype=float)
    n = len(y)
    return Telemetry(
        t=np.arange(n, dtype=float),
        rpm=np.full(n, 1000.0),
        power=np.full(n, 500.0),
        values=y.reshape(-1, 1),
        channels=("x",),
    )


def _alternating(n=N_FRAMES):
    return 1.0 + 0.01 * (np.arange(n) % 2)


@pytest.fixture
def model():
    return DecisionTreeModel.leaf([1.0], ["x"])


@pytest.fixture
def healthy_run():
    return _run(_alternating())


@pytest.fixture
def fault_run():
    y = _alternating()
    y[FAULT_FRAME:] = 1.2
    return _run(y)


@pytest.fixture
def thresholds(model, healthy_run):
    return calibrate(model, healthy_run, window=5, margin=1.5)


class TestSignals:
    """Tests for relative deviation and finite differences."""

    def test_deviation(self):
        """Test e = (y - y_hat) / y_hat."""
        assert deviation(1.05, 1.0) == pytest.approx(0.05)
        assert deviation(0.9, 1.2) == pytest.approx(-0.25)

    def test_deviation_indeterminate(self):
        """Test that a vanishing prediction gives NaN instead of dividing."""
        e = deviation([1.0, 1.0], [0.0, 2.0])

        assert np.isnan(e[0])
        assert e[1] == pytest.approx(-0.5)

    def test_derivative(self):
        """Test first and second forward differences."""
        v = derivative([0.0, 0.1, 0.2], 1.0)

        np.testing.assert_allclose(v, [0.1, 0.1])
        np.testing.assert_allclose(derivative(v, 1.0), [0.0], atol=1e-15)
        np.testing.assert_allclose(derivative([0.0, 0.1], 0.5), [0.2])

    @pytest.mark.parametrize("stream,step", [([1.0], 1.0), ([1.0, 2.0], 0.0)])
    def test_derivative_errors(self, stream, step):
        """Test that short streams and non-positive periods are rejected."""
        with pytest.raises(DetectionError):
            derivative(stream, step)

    def test_state_alignment(self):
        """Test that v lands on frame t+1 and a on frame t+2."""
        t = np.arange(4, dtype=float)
        y = np.array([[1.0], [1.1], [1.3], [1.3]])
        state = compute_state(y, np.ones_like(y), t, ["x"], 1.0, 1)
        v, a = state.aligned()

        assert np.isnan(v[0, 0])
        assert v[1, 0] == pytest.approx(0.1)
        assert np.isnan(a[:2, 0]).all()
        assert a[2, 0] == pytest.approx(0.1)
        assert a[3, 0] == pytest.approx(-0.2)

    def test_state_smooths_causally(self):
        """Test that the smoothed deviation is a trailing mean."""
        t = np.arange(3, dtype=float)
        y = np.array([[1.0], [1.2], [1.4]])
        state = compute_state(y, np.ones_like(y), t, ["x"], 1.0, 2)

        np.testing.assert_allclose(state.e_smooth[:, 0], [0.0, 0.1, 0.3])

    def test_state_for_missing_channel(self, healthy_run):
        """Test that the telemetry must carry every model channel."""
        with pytest.raises(DetectionError, match="not present"):
            state_for(DecisionTreeModel.leaf([1.0], ["y"]), healthy_run, 5)


class TestCalibration:
    """Tests for threshold calibration on a healthy run."""

    def test_thresholds_are_scaled_maxima(self, model, healthy_run):
        """Test thresholds as margin times the largest post-warm-up |v| and |a|."""
        state = state_for(model, healthy_run, 5)
        v, a = state.aligned()
        thresholds = thresholds_from_state(state, margin=2.0)

        assert thresholds.warmup_samples == 5
        assert thresholds.v_threshold["x"] == pytest.approx(
            2.0 * np.nanmax(np.abs(v[5:, 0]))
        )
        assert thresholds.a_threshold["x"] == pytest.approx(
            2.0 * np.nanmax(np.abs(a[5:, 0]))
        )
        assert thresholds.deviation_threshold == {"x": 0.05}

    def test_calibrate_records_provenance(self, thresholds, healthy_run):
        """Test the digest, date and settings stored with the thresholds."""
        assert thresholds.profile_digest == healthy_run.digest()
        assert thresholds.calibrated_on == "1970-01-01"
        assert thresholds.window == 5
        assert thresholds.margin == 1.5
        assert thresholds.degenerate == []

    def test_warmup_longer_than_run(self, model, healthy_run):
        """Test that a warm-up covering the whole run is rejected."""
        state = state_for(model, healthy_run, 5)

        with pytest.raises(DetectionError, match="warm-up"):
            thresholds_from_state(state, warmup_samples=N_FRAMES)

    def test_flat_channel_gets_floor(self, model):
        """Test that a perfectly predicted channel is floored and flagged."""
        thresholds = calibrate(model, _run(np.ones(20)), window=3)

        assert thresholds.degenerate == ["x"]
        assert thresholds.v_threshold["x"] == DEFAULT_FLOOR
        assert thresholds.a_threshold["x"] == DEFAULT_FLOOR

    def test_indeterminate_channel(self, healthy_run):
        """Test that a channel predicted as zero throughout cannot calibrate."""
        with pytest.raises(DetectionError, match="indeterminate"):
            calibrate(DecisionTreeModel.leaf([0.0], ["x"]), healthy_run, window=3)

    def test_too_short(self, model):
        """Test that calibration needs three frames."""
        with pytest.raises(DetectionError, match="at least 3"):
            calibrate(model, _run([1.0, 1.0]), window=1)

    def test_non_positive_margin(self, model, healthy_run):
        """Test that the margin must be positive."""
        with pytest.raises(DetectionError, match="margin"):
            calibrate(model, healthy_run, window=5, margin=0.0)


class TestThresholdSet:
    """Tests for the stored threshold set."""

    def test_rejects_non_positive(self, thresholds):
        """Test that every threshold must be positive."""
        data = thresholds.model_dump()
        data["v_threshold"] = {"x": 0.0}

        with pytest.raises(ValidationError, match="must be > 0"):
            ThresholdSet.model_validate(data)

    def test_rejects_missing_channel(self, thresholds):
        """Test that every channel needs every threshold."""
        data = thresholds.model_dump()
        data["channels"] = ["x", "y"]

        with pytest.raises(ValidationError, match="missing channel"):
            ThresholdSet.model_validate(data)

    def test_file_round_trip(self, thresholds, tmp_path):
        """Test that saved thresholds load back unchanged."""
        path = thresholds.save(tmp_path / "thresholds.json")

        assert ThresholdSet.load(path) == thresholds

    def test_load_missing(self, tmp_path):
        """Test that a missing threshold file is reported."""
        with pytest.raises(DetectionError, match="not found"):
            ThresholdSet.load(tmp_path / "thresholds.json")

    @pytest.mark.parametrize(
        "content", ['{"channels": ["x"]}', "not json at all", '{"channels": 3}']
    )
    def test_load_invalid_names_file(self, tmp_path, content):
        """Test that a malformed threshold file is a data error naming the file."""
        path = tmp_path / "broken-thresholds.json"
        path.write_text(content)

        with pytest.raises(DataError, match="broken-thresholds.json"):
            ThresholdSet.load(path)


class TestDetector:
    """Tests for running the detection rules over a run."""

    def test_healthy_run_is_quiet(self, model, healthy_run, thresholds):
        """Test that the calibration run raises nothing."""
        report, _ = run_detector(model, healthy_run, thresholds)

        assert report.alarm is None
        assert report.action is None
        assert all(frame is None for frame in report.detections.values())

    def test_step_fault(self, model, fault_run, thresholds):
        """Test that the derivative rule fires on the step and beats the 5% rule."""
        report, state = run_detector(model, fault_run, thresholds)

        assert report.crossings[RULE_FIRST]["x"] == FAULT_FRAME
        assert report.crossings[RULE_SECOND]["x"] == FAULT_FRAME
        assert report.detections[RULE_COMBINED] == FAULT_FRAME
        assert report.detections[RULE_DEVIATION] == FAULT_FRAME + 1
        assert report.lead_time_samples == 1
        assert report.first_channel[RULE_COMBINED] == "x"
        assert report.detection_times[RULE_COMBINED] == float(FAULT_FRAME)
        assert report.derivative_alarm and report.deviation_alarm
        assert report.alarm == "derivative"
        assert report.action == SHUTDOWN_ACTION
        assert report.indeterminate_samples == {"x": 0}
        assert len(state) == N_FRAMES

    def test_confirmation(self, model, fault_run, thresholds):
        """Test that confirmation waits for consecutive threshold crossings."""
        report, _ = run_detector(model, fault_run, thresholds, confirm_samples=3)

        assert report.crossings[RULE_FIRST]["x"] == FAULT_FRAME + 2
        assert report.crossings[RULE_SECOND]["x"] is None
        assert report.detections[RULE_COMBINED] == FAULT_FRAME + 2
        assert report.detections[RULE_DEVIATION] == FAULT_FRAME + 3

    def test_warmup_suppresses_alarms(self, model, fault_run, thresholds):
        """Test that nothing fires inside the warm-up period."""
        report, _ = run_detector(
            model, fault_run, thresholds, warmup_samples=FAULT_FRAME + 5
        )

        assert report.crossings[RULE_FIRST]["x"] is None
        assert report.detections[RULE_COMBINED] == FAULT_FRAME + 5
        assert report.detections[RULE_DEVIATION] == FAULT_FRAME + 5

    def test_deviation_only(self, model, thresholds):
        """Test the inspection action when only the 5% rule fires."""
        raised = thresholds.model_copy(
            update={"v_threshold": {"x": 10.0}, "a_threshold": {"x": 10.0}}
        )
        y = _alternating()
        y[FAULT_FRAME:] = 1.2
        report, _ = run_detector(model, _run(y), raised)

        assert report.alarm == "deviation"
        assert report.action == WARNING_ACTION
        assert report.lead_time_samples is None

    def test_chunks_match_single_pass(self, model, fault_run, thresholds):
        """Test that streaming in chunks reports what a single pass reports."""
        monitor = EngineMonitor(model, thresholds)
        raised = []
        for start in range(0, N_FRAMES, 7):
            raised.extend(monitor.update(fault_run.slice(start, start + 7)))
        report, _ = run_detector(model, fault_run, thresholds)

        assert monitor.report() == report
        assert (FAULT_FRAME, RULE_COMBINED, "x") in raised
        assert raised == sorted(raised)

    def test_accepts_frames(self, model, fault_run, thresholds):
        """Test that an iterable of frames works like a telemetry block."""
        from_frames, _ = run_detector(model, list(fault_run.frames()), thresholds)

        assert from_frames == run_detector(model, fault_run, thresholds)[0]

    def test_channel_mismatch(self, thresholds):
        """Test that the model and thresholds must cover the same channels."""
        with pytest.raises(DetectionError, match="do not match"):
            EngineMonitor(DecisionTreeModel.leaf([1.0], ["y"]), thresholds)

    def test_too_few_frames(self, model, thresholds):
        """Test that detection needs three frames."""
        with pytest.raises(DetectionError, match="at least 3"):
            run_detector(model, _run([1.0, 1.0]), thresholds)

    def test_no_state_before_frames(self, model, thresholds):
        """Test that a fresh monitor has no state."""
        with pytest.raises(DetectionError):
            EngineMonitor(model, thresholds).report()

    def test_export_traces(self, model, fault_run, thresholds, tmp_path):
        """Test the per-channel trace files and the report file."""
        report, state = run_detector(model, fault_run, thresholds)
        written = export_traces(state, report, tmp_path / "traces")

        assert [p.name for p in written] == ["x.csv", "detection.json"]
        header = written[0].read_text().splitlines()[0]
        assert header == "t,y,y_hat,e,e_smooth,v,a"
        saved = json.loads(written[1].read_text())
        assert saved["detections"][RULE_COMBINED] == FAULT_FRAME

    def test_export_is_reproducible(self, model, fault_run, thresholds, tmp_path):
        """Test that exporting the same run twice writes identical bytes."""
        report, state = run_detector(model, fault_run, thresholds)
        first = export_traces(state, report, tmp_path / "a")
        second = export_traces(state, report, tmp_path / "b")

        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_exported_deviation_is_consistent(self, thresholds, tmp_path):
        """Test that e can be recomputed from the exported y and y_hat."""
        y = 1.0 + 0.01 * np.random.default_rng(2).normal(size=N_FRAMES)
        leaf = DecisionTreeModel.leaf([1.0 / 3.0], ["x"])
        report, state = run_detector(leaf, _run(y), thresholds)
        (trace, _) = export_traces(state, report, tmp_path)
        frame = pd.read_csv(trace, float_precision="round_trip")

        recomputed = (frame["y"] - frame["y_hat"]) / frame["y_hat"]
        np.testing.assert_allclose(frame["e"], recomputed, rtol=0, atol=1e-12)


class TestKink:
    """Tests for a slow drift that bends sharply below the 5% limit."""

    KINK = 1200

    @pytest.fixture
    def calibrated(self, model):
        y = 1.0 + 0.001 * np.random.default_rng(0).normal(size=2000)
        return calibrate(model, _run(y), window=20, margin=1.5)

    @pytest.fixture
    def kinked_run(self):
        """e ramps from 0 to 4% over 1000 samples, then falls 0.4% per sample."""
        t = np.arange(1400)
        e = np.clip((t - 200) * 4e-5, 0.0, 0.04)
        e[self.KINK :] = np.maximum(0.04 - 0.004 * (t[self.KINK :] - self.KINK), 0.0)
        return _run(1.0 + e)

    def test_derivative_catches_the_kink(self, model, calibrated, kinked_run):
        """Test that only the derivative rule fires, a few samples after the bend."""
        report, state = run_detector(model, kinked_run, calibrated)

        assert np.nanmax(np.abs(state.e_smooth)) < 0.05
        assert report.detections[RULE_DEVIATION] is None
        assert self.KINK < report.detections[RULE_COMBINED] <= self.KINK + 10
        assert report.alarm == "derivative"

    def test_ramp_alone_stays_quiet(self, model, calibrated, kinked_run):
        """Test that the slow ramp up to the bend raises nothing."""
        report, _ = run_detector(model, kinked_run.slice(0, self.KINK), calibrated)

        assert report.alarm is None


class TestInvariants:
    """Tests for properties every run must satisfy."""

    @pytest.fixture
    def noisy(self):
        return 1.0 + 0.001 * np.random.default_rng(7).normal(size=(300, 1))

    def test_prefix_does_not_see_the_future(self, noisy):
        """Test that truncating a run leaves the earlier signals unchanged."""
        t = np.arange(300, dtype=float)
        full = compute_state(noisy, np.ones_like(noisy), t, ["x"], 1.0, 20)
        head = compute_state(
            noisy[:120], np.ones((120, 1)), t[:120], ["x"], 1.0, 20
        )

        np.testing.assert_array_equal(head.e_smooth, full.e_smooth[:120])
        np.testing.assert_array_equal(head.v, full.v[:119])
        np.testing.assert_array_equal(head.a, full.a[:118])

    @pytest.mark.parametrize("scale", [1e-3, 7.0, 1e4])
    def test_deviation_ignores_units(self, noisy, scale):
        """Test that rescaling measurement and prediction leaves e unchanged."""
        y_hat = np.full_like(noisy, 0.98)

        np.testing.assert_allclose(
            deviation(scale * noisy, scale * y_hat),
            deviation(noisy, y_hat),
            rtol=1e-12,
        )

    def test_derivative_is_linear(self):
        """Test that differencing a combination combines the differences."""
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(2, 50))

        np.testing.assert_allclose(
            derivative(2.0 * x - 3.0 * y, 0.5),
            2.0 * derivative(x, 0.5) - 3.0 * derivative(y, 0.5),
            atol=1e-12,
        )

    def test_larger_margin_never_detects_earlier(self, model, healthy_run, fault_run):
        """Test that detection frames do not decrease as the margin grows."""
        frames = []
        for margin in (1.0, 1.5, 3.0, 10.0, 100.0):
            thresholds = calibrate(model, healthy_run, window=5, margin=margin)
            report, _ = run_detector(model, fault_run, thresholds)
            frame = report.detections[RULE_COMBINED]
            frames.append(np.inf if frame is None else frame)

        assert frames == sorted(frames)
        assert frames[-1] == np.inf

    def test_calibration_run_replays_quietly(self, model, noisy):
        """Test that at margin 1 the calibration run raises no derivative alarm."""
        run = _run(noisy[:, 0])
        thresholds = calibrate(model, run, window=20, margin=1.0)
        report, _ = run_detector(model, run, thresholds)

        assert not report.derivative_alarm
        assert report.detections[RULE_COMBINED] is None


class TestStreaming:
    """Tests for chunked processing with bounded state."""

    @pytest.mark.parametrize("chunk", [1, 3, 7, N_FRAMES])
    def test_chunk_size_does_not_change_state(
        self, model, fault_run, thresholds, chunk
    ):
        """Test that every chunking yields the same deviation state, bit for bit."""
        _, single = run_detector(model, fault_run, thresholds)
        monitor = EngineMonitor(model, thresholds, keep_history=True)
        for start in range(0, N_FRAMES, chunk):
            monitor.update(fault_run.slice(start, start + chunk))
        state = monitor.state

        for name in ("e", "e_smooth", "v", "a"):
            np.testing.assert_array_equal(getattr(state, name), getattr(single, name))

    def test_stream_matches_batch_state(self, model, fault_run, thresholds):
        """Test that streamed signals equal the whole-run computation."""
        _, streamed = run_detector(model, fault_run, thresholds)
        batch = compute_state(
            fault_run.values, np.ones((N_FRAMES, 1)), fault_run.t, ["x"], 1.0, 5
        )

        np.testing.assert_array_equal(streamed.e_smooth, batch.e_smooth)
        np.testing.assert_array_equal(streamed.v, batch.v)
        np.testing.assert_array_equal(streamed.a, batch.a)

    def test_buffer_stays_within_window(self, model, thresholds):
        """Test that a long stream keeps only one window of samples between chunks."""
        y = np.tile(_alternating(), 25)
        run = _run(y)
        monitor = EngineMonitor(model, thresholds)
        for start in range(0, len(y), 13):
            monitor.update(run.slice(start, start + 13))
            assert monitor.buffered_samples <= thresholds.window

        assert monitor.n_frames == len(y)
        assert monitor.buffered_samples == thresholds.window
        assert monitor.report().n_frames == len(y)

    def test_no_history_by_default(self, model, fault_run, thresholds):
        """Test that traces are only available when history is kept."""
        monitor = EngineMonitor(model, thresholds)
        monitor.update(fault_run)

        with pytest.raises(DetectionError, match="keep_history"):
            monitor.state

    def test_smoothing_skips_missing_samples(self):
        """Test the trailing mean around an indeterminate sample."""
        smoother = TrailingMean(2, 1)
        out = np.concatenate(
            [smoother.push([[1.0], [np.nan]]), smoother.push([[3.0], [5.0]])]
        )

        np.testing.assert_allclose(out[:, 0], [1.0, np.nan, 3.0, 4.0])

    def test_smoothing_agrees_with_moving_average(self):
        """Test that streamed smoothing matches the pre-processing moving average."""
        series = np.random.default_rng(4).normal(size=(200, 2))
        smoother = TrailingMean(30, 2)
        streamed = np.vstack(
            [smoother.push(series[i : i + 17]) for i in range(0, 200, 17)]
        )

        np.testing.assert_allclose(streamed, moving_average(series, 30), atol=1e-12)


class TestOnset:
    """Tests for separating alarms before a known fault onset."""

    @pytest.fixture
    def spiky_run(self):
        """A lone spike at frame 10, then the step fault at frame 20."""
        y = _alternating()
        y[10] = 1.15
        y[FAULT_FRAME:] = 1.2
        return _run(y)

    def test_early_alarm_is_reported_as_false(self, model, spiky_run, thresholds):
        """Test that a pre-onset alarm is not counted as the fault detection."""
        report, _ = run_detector(model, spiky_run, thresholds, onset=FAULT_FRAME)

        assert report.detections[RULE_COMBINED] == 10
        assert report.false_alarm
        assert report.false_alarms[RULE_COMBINED] == 10
        assert report.false_alarms[RULE_DEVIATION] is None
        assert report.onset_detections[RULE_COMBINED] == FAULT_FRAME
        assert report.onset_detections[RULE_DEVIATION] == FAULT_FRAME + 1
        assert report.detection(RULE_COMBINED) == FAULT_FRAME
        assert report.lead_time_samples == 1

    def test_clean_run_has_no_false_alarm(self, model, fault_run, thresholds):
        """Test that alarms at or after the onset are plain detections."""
        report, _ = run_detector(model, fault_run, thresholds, onset=FAULT_FRAME)

        assert not report.false_alarm
        assert report.onset_detections == report.detections
        assert report.lead_time_samples == 1

    def test_unknown_onset(self, model, spiky_run, thresholds):
        """Test that without an onset every first crossing is a detection."""
        report, _ = run_detector(model, spiky_run, thresholds)

        assert report.onset is None
        assert report.false_alarms == {}
        assert report.detection(RULE_COMBINED) == 10

    def test_negative_onset(self, model, thresholds):
        """Test that the onset cannot precede the stream."""
        with pytest.raises(DetectionError, match="onset"):
            EngineMonitor(model, thresholds, onset=-1)
