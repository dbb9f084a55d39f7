"""Exception hierarchy shared by every derivwatch module."""

from typing import Optional


class DerivwatchError(Exception):
    """Base class for all errors raised by derivwatch."""


class ConfigError(DerivwatchError, ValueError):
    """Invalid or unreadable configuration."""


class UsageError(DerivwatchError):
    """Bad command-line usage."""


class SimulationError(DerivwatchError, ValueError):
    """Invalid load profile, sensor set or fault definition."""


class DataError(DerivwatchError, ValueError):
    """Telemetry or dataset content that cannot be processed."""


class EmptyDatasetError(DataError):
    """Raised when cleaning or filtering leaves no samples."""


class ScalerError(DerivwatchError, ValueError):
    """Degenerate scaling statistics (zero spread)."""


class TrainingError(DerivwatchError):
    """Model training diverged or could not start."""


class ModelError(DerivwatchError, ValueError):
    """Untrained model, shape mismatch or unreadable model file."""


class ConvergenceError(DerivwatchError):
    """An iterative solver hit its iteration cap."""


class DetectionError(DerivwatchError, ValueError):
    """Calibration or detection could not be carried out."""


class StageError(DerivwatchError):
    """An experiment stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: Optional[BaseException] = None):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
