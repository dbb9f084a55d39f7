"""End-to-end experiment: simulate, prepare, augment, train, select, detect, compare."""

import hashlib
import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr

from .augment import augment, train_vae
from .baseline import (
    BaselineComparison,
    OcsvmReport,
    compare_detection,
    export_decisions,
    run_baseline,
    train_ocsvm,
)
from .config import ExperimentConfig
from .detect import (
    RULE_COMBINED,
    RULE_DEVIATION,
    DetectionReport,
    DeviationState,
    ThresholdSet,
    calibrate,
    export_traces,
    run_detector,
)
from .errors import DataError, DetectionError, StageError
from .models import MODEL_KINDS, MseTable, mse_tables, select_model, train_all
from .prep import (
    Dataset,
    VariableDeviation,
    clean,
    denoise,
    rank_variables,
    selected_channels,
    split,
)
from .sim import generate_profile, inject_fault
from .telemetry import Telemetry

logger = logging.getLogger(__name__)

AUGMENTED = "augmented"
REAL_ONLY = "real_only"


class BranchResult(BaseModel):
    """Train and test MSE tables for one data branch."""

    n_train: int
    n_test: int
    n_synthetic: int = 0
    train: Dict[str, MseTable]
    test: Dict[str, MseTable]


class ResultBundle(BaseModel):
    config: Dict[str, Any]
    config_digest: str
    seeds: Dict[str, int]
    ranking: List[VariableDeviation] = Field(default_factory=list)
    selected_channels: List[str]
    n_real_samples: int
    removed_samples: int = 0
    vae_loss: List[float] = Field(default_factory=list)
    branches: Dict[str, BranchResult]
    selection_branch: str
    chosen_model: str
    selection_tie: bool = False
    thresholds: ThresholdSet
    fault_onset_index: Optional[int] = None
    detection: Optional[DetectionReport] = None
    baseline: Optional[OcsvmReport] = None
    comparison: Optional[BaselineComparison] = None
    timings: Dict[str, float] = Field(default_factory=dict)

    _state: Optional[DeviationState] = PrivateAttr(default=None)
    _baseline_trace: Optional[Tuple[np.ndarray, ...]] = PrivateAttr(default=None)

    def canonical_dict(self) -> Dict[str, Any]:
        """Everything except wall-clock timings and the calibration date."""
        data = self.model_dump(mode="json", exclude={"timings"})
        data["thresholds"]["calibrated_on"] = ""
        return data

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @property
    def state(self) -> Optional[DeviationState]:
        return self._state


@contextmanager
def _stage(name: str, timings: Dict[str, float]) -> Iterator[None]:
    logger.info(f"Stage {name} started")
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage {name} failed: {e}")
        raise StageError(name, e) from e
    finally:
        timings[name] = time.perf_counter() - start
    logger.info(f"Stage {name} finished in {timings[name]:.2f}s")


def _onset_index(telemetry: Telemetry, onset_s: float) -> int:
    return int(np.searchsorted(telemetry.t, onset_s, side="left"))


def partition_branches(
    data: Dataset,
    config: ExperimentConfig,
    seeds: Dict[str, int],
) -> Tuple[Dict[str, Tuple[Dataset, Dataset]], List[float]]:
    """Train/test partitions per branch, plus the VAE loss history.

    Real rows are split once. The VAE only sees the real training rows and
    synthetic rows are only added to the training side, so every branch is
    scored on the same real test rows.
    """
    train, test = split(
        data,
        config.prep.train_fraction,
        seed=seeds["split"],
        chronological=config.prep.chronological_split,
    )
    aug = config.augmentation
    partitions: Dict[str, Tuple[Dataset, Dataset]] = {}
    vae_loss: List[float] = []
    if aug.enabled:
        vae = train_vae(train, aug.vae, seeds["augment.train"])
        vae_loss = vae.loss_history
        combined = augment(
            train,
            vae,
            int(round(aug.ratio * len(train))),
            seeds["augment.generate"],
            start_index=int(data.index.max()) + 1,
        )
        partitions[AUGMENTED] = (combined, test.with_scalers(combined))
    if not aug.enabled or aug.ablation:
        partitions[REAL_ONLY] = (train, test)
    return partitions, vae_loss


def _evaluate_branch(
    train: Dataset,
    test: Dataset,
    config: ExperimentConfig,
    seeds: Dict[str, int],
) -> Tuple[BranchResult, Dict[str, Any]]:
    models = train_all(train, config.models, {k: seeds[k] for k in MODEL_KINDS})
    result = BranchResult(
        n_train=len(train),
        n_test=len(test),
        n_synthetic=int(train.synthetic.sum()),
        train=mse_tables(models, train),
        test=mse_tables(models, test),
    )
    return result, models


def run_experiment(config: ExperimentConfig) -> ResultBundle:
    """Run every stage in order; a failure is re-raised as ``StageError``."""
    timings: Dict[str, float] = {}
    stages = (
        "simulate.train",
        "simulate.calibrate",
        "simulate.fault",
        "augment.train",
        "augment.generate",
        "split",
        "baseline",
    ) + MODEL_KINDS
    seeds = {stage: config.stage_seed(stage) for stage in stages}
    sim = config.simulation
    window = config.window_samples
    logger.info(f"Experiment {config.digest()[:12]} with seed {config.seed}")

    with _stage("simulate", timings):
        healthy = generate_profile(sim.profile, sim.sensors, seeds["simulate.train"])
        calibration = generate_profile(
            sim.profile, sim.sensors, seeds["simulate.calibrate"]
        )
        faulty = None
        if sim.fault is not None:
            faulty = inject_fault(
                generate_profile(sim.profile, sim.sensors, seeds["simulate.fault"]),
                sim.fault,
            )

    ranking: List[VariableDeviation] = []
    onset: Optional[int] = None
    with _stage("prep", timings):
        data = clean(healthy)
        if faulty is not None:
            onset = _onset_index(faulty, sim.fault.onset_s)
            ranking = rank_variables(
                clean(healthy.slice(onset)),
                clean(faulty.slice(onset)),
                top_k=config.prep.top_k,
                min_deviation_pct=config.prep.min_deviation_pct,
            )
            channels = selected_channels(ranking)
        else:
            channels = list(data.channels)
        if not channels:
            raise DataError("variable selection kept no channels")
        logger.info(f"Selected channels: {channels}")
        data = data.select(channels)
        if config.prep.denoise_training:
            data = denoise(data, window)

    aug = config.augmentation
    with _stage("augment", timings):
        partitions, vae_loss = partition_branches(data, config, seeds)

    branches: Dict[str, BranchResult] = {}
    trained: Dict[str, Dict[str, Any]] = {}
    with _stage("train", timings):
        for name, (train, test) in partitions.items():
            branches[name], trained[name] = _evaluate_branch(
                train, test, config, seeds
            )

    with _stage("select", timings):
        selection_branch = AUGMENTED if aug.enabled else REAL_ONLY
        tests = branches[selection_branch].test
        chosen = select_model(tests)
        best = tests[chosen].normalized_aggregate
        tie = sum(t.normalized_aggregate == best for t in tests.values()) > 1
        model = trained[selection_branch][chosen]

    det = config.detection
    with _stage("calibrate", timings):
        thresholds = calibrate(
            model,
            calibration,
            window=window,
            margin=det.margin,
            warmup_samples=det.warmup_samples,
            deviation_threshold=det.deviation_threshold,
            floor=det.floor,
        )

    report: Optional[DetectionReport] = None
    state: Optional[DeviationState] = None
    baseline_report: Optional[OcsvmReport] = None
    comparison: Optional[BaselineComparison] = None
    baseline_trace = None
    if faulty is not None:
        with _stage("detect", timings):
            report, state = run_detector(
                model,
                faulty,
                thresholds,
                window=window,
                warmup_samples=det.warmup_samples,
                confirm_samples=det.confirm_samples,
                onset=onset,
            )
        with _stage("baseline", timings):
            ocsvm = train_ocsvm(data, config.baseline, seeds["baseline"])
            baseline_report, labels, values = run_baseline(
                ocsvm,
                faulty,
                config.baseline.k_stable,
                config.baseline.arm_samples,
            )
            comparison = compare_detection(baseline_report, report)
            baseline_trace = (np.array(faulty.t), values, labels)

    bundle = ResultBundle(
        config=config.model_dump(mode="json"),
        config_digest=config.digest(),
        seeds=seeds,
        ranking=ranking,
        selected_channels=channels,
        n_real_samples=len(data),
        removed_samples=data.removed,
        vae_loss=vae_loss,
        branches=branches,
        selection_branch=selection_branch,
        chosen_model=chosen,
        selection_tie=tie,
        thresholds=thresholds,
        fault_onset_index=onset,
        detection=report,
        baseline=baseline_report,
        comparison=comparison,
        timings=timings,
    )
    bundle._state = state
    bundle._baseline_trace = baseline_trace
    logger.info(f"Experiment finished; bundle digest {bundle.digest()[:12]}")
    return bundle


class LeadTimeRow(BaseModel):
    scenario: str
    onset: Optional[int]
    derivative: Optional[int]
    deviation: Optional[int]
    ocsvm: Optional[int]
    false_alarm: Optional[int]
    derivative_vs_deviation: Optional[int]
    derivative_vs_ocsvm: Optional[int]
    deviation_vs_ocsvm: Optional[int]


def _lead(later: Optional[int], earlier: Optional[int]) -> Optional[int]:
    if later is None or earlier is None:
        return None
    return later - earlier


def lead_time_table(bundles: Sequence[ResultBundle]) -> List[LeadTimeRow]:
    """Detection sample per rule and pairwise lead times, one row per bundle.

    Detections are the first crossings at or after the fault onset; an
    earlier derivative crossing goes to ``false_alarm`` instead. A lead time
    is the later rule's detection minus the earlier-listed rule's, so
    positive values mean the first-named rule fired first.
    """
    rows = []
    for bundle in bundles:
        if bundle.detection is None or bundle.fault_onset_index is None:
            raise DetectionError(
                f"bundle {bundle.config_digest[:12]} has no fault scenario"
            )
        derivative = bundle.detection.detection(RULE_COMBINED)
        dev = bundle.detection.detection(RULE_DEVIATION)
        ocsvm = bundle.baseline.detection if bundle.baseline else None
        rows.append(
            LeadTimeRow(
                scenario=bundle.config_digest[:12],
                onset=bundle.fault_onset_index,
                derivative=derivative,
                deviation=dev,
                ocsvm=ocsvm,
                false_alarm=bundle.detection.false_alarms.get(RULE_COMBINED),
                derivative_vs_deviation=_lead(dev, derivative),
                derivative_vs_ocsvm=_lead(ocsvm, derivative),
                deviation_vs_ocsvm=_lead(ocsvm, dev),
            )
        )
    return rows


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> List[str]:
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join("---" for _ in header) + "|",
    ]
    lines += ["| " + " | ".join(_cell(v) for v in row) + " |" for row in rows]
    return lines


def format_lead_time_table(rows: Sequence[LeadTimeRow]) -> str:
    header = list(LeadTimeRow.model_fields)
    body = [[getattr(row, name) for name in header] for row in rows]
    return "\n".join(_markdown_table(header, body)) + "\n"


def _mse_section(name: str, branch: BranchResult) -> List[str]:
    lines = [f"### {name} ({branch.n_train} train / {branch.n_test} test rows)", ""]
    for partition, tables in (("train", branch.train), ("test", branch.test)):
        models = list(tables)
        channels = tables[models[0]].channels
        rows = [
            [channel] + [tables[m].mse[i] for m in models]
            for i, channel in enumerate(channels)
        ]
        rows.append(
            ["normalized aggregate"]
            + [tables[m].normalized_aggregate for m in models]
        )
        lines += [f"{partition.capitalize()} MSE:", ""]
        lines += _markdown_table(["channel"] + models, rows)
        lines.append("")
    return lines


def render_report(bundle: ResultBundle) -> str:
    lines = [
        f"# Experiment {bundle.config_digest[:12]}",
        "",
        f"- global seed: {bundle.config.get('seed')}",
        f"- real samples: {bundle.n_real_samples} ({bundle.removed_samples} removed)",
        f"- selected channels: {', '.join(bundle.selected_channels)}",
        f"- chosen model: **{bundle.chosen_model}** "
        f"(from the {bundle.selection_branch} branch"
        + (", tie broken by name order)" if bundle.selection_tie else ")"),
        "",
    ]
    if bundle.ranking:
        lines += ["## Variable ranking", ""]
        lines += _markdown_table(
            ["channel", "deviation %", "selected"],
            [[v.channel, v.deviation_pct, v.selected] for v in bundle.ranking],
        )
        lines.append("")
    lines += ["## Model error", ""]
    for name, branch in bundle.branches.items():
        lines += _mse_section(name, branch)

    th = bundle.thresholds
    lines += [f"## Thresholds (margin {th.margin}, window {th.window})", ""]
    lines += _markdown_table(
        ["channel", "v", "a", "deviation"],
        [
            [c, th.v_threshold[c], th.a_threshold[c], th.deviation_threshold[c]]
            for c in th.channels
        ],
    )
    lines.append("")
    if th.degenerate:
        lines += [f"Degenerate (floored) channels: {', '.join(th.degenerate)}", ""]

    if bundle.detection is not None:
        report = bundle.detection
        lines += ["## Detection", ""]
        lines += _markdown_table(
            ["rule", "frame", "from onset", "first channel"],
            [
                [
                    rule,
                    report.detections[rule],
                    report.detection(rule),
                    report.first_channel[rule],
                ]
                for rule in report.detections
            ],
        )
        lines += [
            "",
            f"- fault onset frame: {bundle.fault_onset_index}",
            f"- alarm: {report.alarm or 'none'}; action: {report.action or 'none'}",
            f"- first crossing before the onset: "
            f"{_cell(report.false_alarms.get(RULE_COMBINED))}",
            f"- lead time over the deviation rule: {_cell(report.lead_time_samples)}",
            "",
        ]
    if bundle.baseline is not None and bundle.comparison is not None:
        lines += ["## One-class SVM comparison", ""]
        lines += [
            f"- stable detection (k={bundle.comparison.k_stable}): "
            f"{_cell(bundle.comparison.ocsvm_detection)}",
            f"- oscillations before it: {bundle.comparison.ocsvm_oscillations}",
            f"- derivative rule earlier or equal: "
            f"{bundle.comparison.derivative_earlier_or_equal}",
            f"- assumptions: {json.dumps(bundle.baseline.assumptions, sort_keys=True)}",
            "",
        ]
        lines += ["## Lead times", ""]
        lines.append(format_lead_time_table(lead_time_table([bundle])))
    return "\n".join(lines).rstrip() + "\n"


def emit_report(bundle: ResultBundle, path: Union[str, Path]) -> List[Path]:
    """Write report.md, bundle.json, thresholds.json, timings.json and traces."""
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create report directory {directory}: {e}") from e
    written = []
    for name, content in (
        ("report.md", render_report(bundle)),
        ("bundle.json", bundle.canonical_json()),
        ("thresholds.json", bundle.thresholds.model_dump_json(indent=2) + "\n"),
        ("timings.json", json.dumps(bundle.timings, indent=2, sort_keys=True) + "\n"),
    ):
        target = directory / name
        target.write_text(content)
        written.append(target)
    if bundle.state is not None and bundle.detection is not None:
        written += export_traces(bundle.state, bundle.detection, directory / "traces")
    if bundle._baseline_trace is not None:
        t, values, labels = bundle._baseline_trace
        written.append(
            export_decisions(t, values, labels, directory / "traces" / "ocsvm.csv")
        )
    logger.info(f"Report written to {directory}")
    return written


def load_bundle(path: Union[str, Path]) -> ResultBundle:
    path = Path(path)
    if path.is_dir():
        path = path / "bundle.json"
    if not path.exists():
        raise DataError(f"result bundle not found: {path}")
    return ResultBundle.model_validate_json(path.read_text())


def run_directory(config: ExperimentConfig, runs_dir: Union[str, Path]) -> Path:
    return Path(runs_dir) / config.digest()[:12]
