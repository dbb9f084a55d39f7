import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from .augment import augment, save_vae, train_vae
from .baseline import (
    compare_detection,
    export_decisions,
    run_baseline,
    save_ocsvm,
    train_ocsvm,
)
from .config import (
    ExperimentConfig,
    Settings,
    resolve_config,
    save_config,
    validate_config,
)
from .detect import (
    DetectionReport,
    ThresholdSet,
    calibrate,
    export_traces,
    run_detector,
)
from .errors import DerivwatchError, UsageError
from .experiment import (
    emit_report,
    format_lead_time_table,
    lead_time_table,
    load_bundle,
    run_directory,
    run_experiment,
)
from .models import (
    MODEL_KINDS,
    dataset_digest,
    evaluate_mse,
    load_model,
    save_model,
    select_model,
    train_model,
)
from .prep import (
    clean,
    denoise,
    rank_variables,
    read_dataset_csv,
    selected_channels,
    split,
    write_dataset_csv,
    write_scalers,
)
from .sim import SimulationRecord, generate_profile, inject_fault, write_run
from .telemetry import read_telemetry_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DERIVATIVE_ALARM = 2
EXIT_DEVIATION_ALARM = 3

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

DEFAULTS_EPILOG = (
    "Model defaults: tree with squared-error splits, min split 2, min leaf 1; "
    "forest of 100 bootstrapped trees with one candidate feature per split; "
    "network with hidden layers 32/24/12, SGD at 0.01; VAE with width 32 and "
    "400 epochs; 300 s smoothing window; 75/25 split; 5% deviation rule."
)


class CliParser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as exceptions."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common_options() -> argparse.ArgumentParser:
    common = CliParser(add_help=False)
    common.add_argument(
        "--config",
        help="experiment config YAML (default: $DERIVWATCH_CONFIG if it exists)",
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.FIELD=VALUE",
        help="override one config field; may be repeated",
    )
    common.add_argument(
        "--seed", type=int, help="global seed; every stage seed derives from it"
    )
    common.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="log level (default: $DERIVWATCH_LOG_LEVEL or INFO)",
    )
    return common


def build_parser() -> CliParser:
    common = _common_options()
    parser = CliParser(
        prog="derivwatch",
        description="Early fault warning from derivatives of sensor deviations.",
        epilog=DEFAULTS_EPILOG,
    )
    sub = parser.add_subparsers(
        dest="command", metavar="COMMAND", parser_class=CliParser
    )
    sub.required = True
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("simulate", parents=[common], formatter_class=fmt,
                       help="generate a telemetry run")
    p.add_argument("--out", required=True, help="telemetry CSV to write")
    p.add_argument(
        "--scenario",
        choices=["train", "calibrate", "fault"],
        default="fault",
        help="which run to generate; 'fault' injects the configured fault",
    )

    p = sub.add_parser("prep", parents=[common], formatter_class=fmt,
                       help="clean, select channels and split")
    p.add_argument("--healthy", required=True, help="healthy telemetry CSV")
    p.add_argument("--faulty", help="faulty telemetry CSV used for channel ranking")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("augment", parents=[common], formatter_class=fmt,
                       help="train the VAE and append synthetic samples")
    p.add_argument("--data", required=True, help="dataset CSV to augment")
    p.add_argument("--out", required=True, help="combined dataset CSV to write")
    p.add_argument("--model-out", help="where to save the trained VAE (JSON)")

    p = sub.add_parser("train", parents=[common], formatter_class=fmt,
                       help="train regressors and report MSE")
    p.add_argument("--train", required=True, help="training dataset CSV")
    p.add_argument("--test", help="test dataset CSV for MSE and model selection")
    p.add_argument("--kind", choices=list(MODEL_KINDS) + ["all"], default="all")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scalers", help="scaler file to reference in the manifest")

    p = sub.add_parser("calibrate", parents=[common], formatter_class=fmt,
                       help="derive thresholds from a healthy run")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--healthy", required=True, help="healthy telemetry CSV")
    p.add_argument("--out", required=True, help="threshold JSON to write")

    p = sub.add_parser("detect", parents=[common], formatter_class=fmt,
                       help="run the detector; exits 2 or 3 on alarm")
    p.add_argument("--model", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--telemetry", required=True)
    p.add_argument("--onset", type=int,
                   help="known fault onset frame; earlier alarms are false alarms")
    p.add_argument("--out-dir", help="write per-channel traces and the JSON report")

    p = sub.add_parser("baseline", parents=[common], formatter_class=fmt,
                       help="train and run the one-class SVM comparator")
    p.add_argument("--healthy", required=True, help="healthy dataset or telemetry CSV")
    p.add_argument("--telemetry", required=True, help="run to score")
    p.add_argument("--channels", nargs="+", help="sensor channels (default: all)")
    p.add_argument("--detection", help="detection.json to compare against")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("experiment", parents=[common], formatter_class=fmt,
                       help="run the whole pipeline")
    p.add_argument(
        "--runs-dir", help="parent of the run directory (default: $DERIVWATCH_RUNS_DIR)"
    )

    p = sub.add_parser("report", parents=[common], formatter_class=fmt,
                       help="lead-time table over finished runs")
    p.add_argument("bundles", nargs="+", help="run directories or bundle.json files")
    p.add_argument("--out", help="markdown file to write the table to")

    p = sub.add_parser("validate", parents=[common], formatter_class=fmt,
                       help="check a config file")
    p.add_argument(
        "path", nargs="?", help="config file (default: --config or $DERIVWATCH_CONFIG)"
    )
    return parser


def _load_config(args: argparse.Namespace, settings: Settings) -> ExperimentConfig:
    path = args.config
    if path is None and Path(settings.config_path).exists():
        path = settings.config_path
    config = resolve_config(path, args.overrides, args.seed)
    logger.info(
        f"Resolved configuration (digest {config.digest()[:12]}):\n{config.to_yaml()}"
    )
    return config


def cmd_simulate(args, config: ExperimentConfig, settings: Settings) -> int:
    sim = config.simulation
    stage = f"simulate.{args.scenario}"
    seed = config.stage_seed(stage)
    telemetry = generate_profile(sim.profile, sim.sensors, seed)
    fault = None
    if args.scenario == "fault":
        if sim.fault is None:
            raise UsageError("the configuration defines no fault to inject")
        fault = sim.fault
        telemetry = inject_fault(telemetry, fault)
    record = SimulationRecord(
        profile=sim.profile, sensors=sim.sensors, fault=fault, seed=seed
    )
    write_run(telemetry, args.out, record)
    return EXIT_OK


def cmd_prep(args, config: ExperimentConfig, settings: Settings) -> int:
    out = Path(args.out_dir)
    healthy = read_telemetry_csv(args.healthy)
    data = clean(healthy)
    if args.faulty:
        faulty = read_telemetry_csv(args.faulty)
        start = 0
        if config.simulation.fault is not None:
            start = int((faulty.t < config.simulation.fault.onset_s).sum())
        ranking = rank_variables(
            clean(healthy.slice(start)),
            clean(faulty.slice(start)),
            top_k=config.prep.top_k,
            min_deviation_pct=config.prep.min_deviation_pct,
        )
        (out / "ranking.json").parent.mkdir(parents=True, exist_ok=True)
        (out / "ranking.json").write_text(
            json.dumps([v.model_dump() for v in ranking], indent=2) + "\n"
        )
        channels = selected_channels(ranking)
        if not channels:
            raise UsageError("no channel passed the selection cutoff")
        data = data.select(channels)
    if config.prep.denoise_training:
        data = denoise(data, config.window_samples)
    train, test = split(
        data,
        config.prep.train_fraction,
        seed=config.stage_seed("split"),
        chronological=config.prep.chronological_split,
    )
    write_dataset_csv(data, out / "dataset.csv")
    write_dataset_csv(train, out / "train.csv")
    write_dataset_csv(test, out / "test.csv")
    write_scalers(train, out / "scalers.json")
    logger.info(
        f"Prepared {len(data)} samples ({data.removed} removed) on channels "
        f"{list(data.channels)} into {out}"
    )
    return EXIT_OK


def cmd_augment(args, config: ExperimentConfig, settings: Settings) -> int:
    data = read_dataset_csv(args.data)
    aug = config.augmentation
    vae = train_vae(data, aug.vae, config.stage_seed("augment.train"))
    count = int(round(aug.ratio * len(data)))
    combined = augment(data, vae, count, config.stage_seed("augment.generate"))
    write_dataset_csv(combined, args.out)
    if args.model_out:
        save_vae(vae, args.model_out)
    return EXIT_OK


def cmd_train(args, config: ExperimentConfig, settings: Settings) -> int:
    train = read_dataset_csv(args.train)
    test = read_dataset_csv(args.test) if args.test else None
    out = Path(args.out_dir)
    kinds = MODEL_KINDS if args.kind == "all" else (args.kind,)
    tables = {}
    digest = dataset_digest(train)
    for kind in kinds:
        model = train_model(kind, train, config.models, config.stage_seed(kind))
        save_model(model, out / f"{kind}.json", digest, args.scalers)
        table = evaluate_mse(model, test if test is not None else train, kind)
        tables[kind] = table
        logger.info(
            f"{kind}: {'test' if test is not None else 'train'} MSE "
            f"{table.as_dict()} (normalized aggregate {table.normalized_aggregate:.6g})"
        )
    summary: Dict[str, object] = {k: t.model_dump() for k, t in tables.items()}
    if test is not None and len(tables) > 1:
        summary["selected"] = select_model(tables)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mse.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def cmd_calibrate(args, config: ExperimentConfig, settings: Settings) -> int:
    det = config.detection
    thresholds = calibrate(
        load_model(args.model),
        read_telemetry_csv(args.healthy),
        window=config.window_samples,
        margin=det.margin,
        warmup_samples=det.warmup_samples,
        deviation_threshold=det.deviation_threshold,
        floor=det.floor,
    )
    thresholds.save(args.out)
    return EXIT_OK


def _alarm_exit_code(report: DetectionReport) -> int:
    if report.derivative_alarm:
        return EXIT_DERIVATIVE_ALARM
    if report.deviation_alarm:
        return EXIT_DEVIATION_ALARM
    return EXIT_OK


def cmd_detect(args, config: ExperimentConfig, settings: Settings) -> int:
    thresholds = ThresholdSet.load(args.thresholds)
    report, state = run_detector(
        load_model(args.model),
        read_telemetry_csv(args.telemetry),
        thresholds,
        window=thresholds.window,
        warmup_samples=config.detection.warmup_samples,
        confirm_samples=config.detection.confirm_samples,
        onset=args.onset,
    )
    if args.out_dir:
        export_traces(state, report, args.out_dir)
    print(json.dumps(report.detections, indent=2))
    return _alarm_exit_code(report)


def cmd_baseline(args, config: ExperimentConfig, settings: Settings) -> int:
    healthy = clean(read_dataset_csv(args.healthy))
    telemetry = read_telemetry_csv(args.telemetry)
    out = Path(args.out_dir)
    model = train_ocsvm(
        healthy, config.baseline, config.stage_seed("baseline"), args.channels
    )
    report, labels, values = run_baseline(
        model, telemetry, config.baseline.k_stable, config.baseline.arm_samples
    )
    save_ocsvm(model, out / "ocsvm.json")
    export_decisions(telemetry.t, values, labels, out / "ocsvm.csv")
    result: Dict[str, object] = {"ocsvm": report.model_dump()}
    if args.detection:
        derivative = DetectionReport.model_validate_json(
            Path(args.detection).read_text()
        )
        result["comparison"] = compare_detection(report, derivative).model_dump()
    (out / "baseline.json").write_text(json.dumps(result, indent=2) + "\n")
    return EXIT_OK


def cmd_experiment(args, config: ExperimentConfig, settings: Settings) -> int:
    directory = run_directory(config, args.runs_dir or settings.runs_dir)
    bundle = run_experiment(config)
    save_config(config, directory / "config.yaml")
    emit_report(bundle, directory)
    print(directory)
    return EXIT_OK


def cmd_report(args, config: ExperimentConfig, settings: Settings) -> int:
    rows = lead_time_table([load_bundle(p) for p in args.bundles])
    table = format_lead_time_table(rows)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


COMMANDS: Dict[str, Callable[..., int]] = {
    "simulate": cmd_simulate,
    "prep": cmd_prep,
    "augment": cmd_augment,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "baseline": cmd_baseline,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def cmd_validate(args, settings: Settings) -> int:
    path = args.path or args.config or settings.config_path
    diagnostics = validate_config(path)
    for line in diagnostics:
        print(line)
    if not diagnostics:
        print(f"{path}: OK")
    return EXIT_OK if not diagnostics else EXIT_ERROR


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run the named stage; returns the process exit code."""
    settings = Settings.from_env()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_ERROR

    level = args.log_level or settings.log_level
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)
    logging.getLogger().setLevel(getattr(logging, level, logging.INFO))

    try:
        if args.command == "validate":
            return cmd_validate(args, settings)
        config = _load_config(args, settings)
        return COMMANDS[args.command](args, config, settings)
    except DerivwatchError as e:
        logger.error(str(e))
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return EXIT_ERROR


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
