"""One-class SVM comparator trained on healthy operating data only.

The dual of the nu-formulation is solved with a first-order SMO loop:

    minimize  1/2 a^T K a   subject to  sum(a) = 1,  0 <= a_i <= 1/(nu m)

and a sample is scored by ``f(x) = sum_i a_i K(x_i, x) - rho``; ``f >= 0`` is
healthy (+1), ``f < 0`` faulty (-1).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .detect import RULE_COMBINED, DetectionReport
from .errors import ConvergenceError, DataError, DetectionError, ModelError
from .prep import Dataset, ScalerParams, standardize
from .telemetry import FLOAT_FORMAT, INPUT_COLUMNS, Telemetry

logger = logging.getLogger(__name__)

HEALTHY = 1
FAULTY = -1
_KERNEL_BLOCK = 256


class OcsvmConfig(BaseModel):
    """nu = 0.05 and gamma = 1 / (d * var) unless set.

    A stable detection needs ``k_stable`` consecutive faulty labels, counted
    once ``arm_samples`` consecutive healthy labels have been seen.
    """

    nu: float = Field(default=0.05, gt=0, le=1)
    gamma: Optional[float] = Field(default=None, gt=0)
    k_stable: int = Field(default=10, ge=1)
    arm_samples: int = Field(default=10, ge=0)
    max_train_samples: int = Field(default=2000, ge=2)
    tolerance: float = Field(default=1e-6, gt=0)
    max_iterations: int = Field(default=1_000_000, ge=1)


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    """``exp(-gamma * |a - b|^2)`` for every row pair, computed elementwise."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    out = np.empty((len(A), len(B)))
    for start in range(0, len(A), _KERNEL_BLOCK):
        block = A[start : start + _KERNEL_BLOCK]
        diff = block[:, None, :] - B[None, :, :]
        out[start : start + _KERNEL_BLOCK] = np.exp(
            -gamma * np.einsum("ijk,ijk->ij", diff, diff)
        )
    return out


@dataclass
class OcsvmModel:
    support_vectors: np.ndarray
    alpha: np.ndarray
    rho: float
    gamma: float
    nu: float
    scaler: ScalerParams
    columns: Tuple[str, ...]
    n_train: int = 0
    iterations: int = 0
    kkt_residual: float = 0.0
    seed: int = 0

    @property
    def is_trained(self) -> bool:
        return len(self.alpha) > 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "columns": list(self.columns),
            "gamma": self.gamma,
            "nu": self.nu,
            "rho": self.rho,
            "alpha": self.alpha.tolist(),
            "support_vectors": self.support_vectors.tolist(),
            "scaler": self.scaler.to_dict(),
            "n_train": self.n_train,
            "iterations": self.iterations,
            "kkt_residual": self.kkt_residual,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OcsvmModel":
        return cls(
            support_vectors=np.array(data["support_vectors"], dtype=float),
            alpha=np.array(data["alpha"], dtype=float),
            rho=float(data["rho"]),
            gamma=float(data["gamma"]),
            nu=float(data["nu"]),
            scaler=ScalerParams.from_dict(data["scaler"]),
            columns=tuple(data["columns"]),
            n_train=data.get("n_train", 0),
            iterations=data.get("iterations", 0),
            kkt_residual=data.get("kkt_residual", 0.0),
            seed=data.get("seed", 0),
        )


def _initial_alpha(m: int, upper: float) -> np.ndarray:
    alpha = np.zeros(m)
    remaining = 1.0
    for i in range(m):
        alpha[i] = min(upper, remaining)
        remaining -= alpha[i]
        if remaining <= 0:
            break
    return alpha


def _most_violating_pair(
    alpha: np.ndarray, grad: np.ndarray, upper: float
) -> Tuple[int, int, float]:
    can_grow = alpha < upper
    can_shrink = alpha > 0
    i = int(np.argmin(np.where(can_grow, grad, np.inf)))
    j = int(np.argmax(np.where(can_shrink, grad, -np.inf)))
    return i, j, float(grad[j] - grad[i])


def solve_dual(
    K: np.ndarray, nu: float, tolerance: float = 1e-6, max_iterations: int = 1_000_000
) -> Tuple[np.ndarray, int, float]:
    """SMO on the nu one-class dual; returns ``(alpha, iterations, kkt_residual)``."""
    m = len(K)
    upper = 1.0 / (nu * m)
    alpha = _initial_alpha(m, upper)
    grad = K @ alpha
    diag = np.diag(K)
    snap = 1e-12 * upper
    for iteration in range(max_iterations):
        i, j, gap = _most_violating_pair(alpha, grad, upper)
        if gap < tolerance:
            return alpha, iteration, gap
        curvature = max(diag[i] + diag[j] - 2.0 * K[i, j], 1e-12)
        step = min(gap / curvature, upper - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        # snap to the bounds so rounding cannot leave a vanishing free range
        if upper - alpha[i] < snap:
            alpha[i] = upper
        if alpha[j] < snap:
            alpha[j] = 0.0
        grad += step * (K[:, i] - K[:, j])
        if iteration == int(0.9 * max_iterations):
            logger.warning(
                f"SMO solver at 90% of its {max_iterations}-iteration cap "
                f"(violation {gap:.3g})"
            )
    _, _, gap = _most_violating_pair(alpha, grad, upper)
    raise ConvergenceError(
        f"SMO did not converge within {max_iterations} iterations "
        f"(KKT residual {gap:.3g} > {tolerance})"
    )


def _offset(alpha: np.ndarray, sums: np.ndarray, upper: float) -> float:
    """rho from the free support vectors, else the middle of the feasible range."""
    eps = 1e-12 * max(upper, 1.0)
    free = (alpha > eps) & (alpha < upper - eps)
    if free.any():
        return float(np.mean(sums[free]))
    at_upper = sums[alpha >= upper - eps]
    at_zero = sums[alpha <= eps]
    if len(at_upper) and len(at_zero):
        return float((at_upper.max() + at_zero.min()) / 2.0)
    return float(at_upper.max() if len(at_upper) else at_zero.min())


def _features(data: Union[Dataset, Telemetry], columns: Sequence[str]) -> np.ndarray:
    if isinstance(data, Dataset):
        frame = dict(zip(data.columns, data.matrix.T))
    else:
        frame = {"rpm": data.rpm, "power": data.power}
        frame.update({c: data.values[:, i] for i, c in enumerate(data.channels)})
    missing = [c for c in columns if c not in frame]
    if missing:
        raise DataError(f"baseline feature column(s) {missing} are not available")
    return np.column_stack([frame[c] for c in columns])


def train_ocsvm(
    healthy: Dataset,
    config: Optional[OcsvmConfig] = None,
    seed: int = 0,
    channels: Optional[Sequence[str]] = None,
) -> OcsvmModel:
    """Fit the boundary on standardized ``rpm, power`` plus the sensor channels."""
    config = config or OcsvmConfig()
    columns = INPUT_COLUMNS + tuple(channels or healthy.channels)
    raw = _features(healthy, columns)
    if len(raw) < 2:
        raise DataError(f"OC-SVM training needs at least 2 samples, got {len(raw)}")
    if len(raw) > config.max_train_samples:
        rows = np.sort(
            np.random.default_rng(seed).choice(
                len(raw), size=config.max_train_samples, replace=False
            )
        )
        raw = raw[rows]
        logger.info(f"OC-SVM trains on a {len(raw)}-sample subsample")

    scaler = ScalerParams.fit(raw, columns).with_unit_floor()
    Z = standardize(raw, scaler)
    variance = float(Z.var())
    gamma = config.gamma or 1.0 / (Z.shape[1] * (variance if variance > 0 else 1.0))
    K = rbf_kernel(Z, Z, gamma)
    alpha, iterations, residual = solve_dual(
        K, config.nu, config.tolerance, config.max_iterations
    )
    keep = alpha > 0
    model = OcsvmModel(
        support_vectors=Z[keep],
        alpha=alpha[keep],
        rho=0.0,
        gamma=gamma,
        nu=config.nu,
        scaler=scaler,
        columns=columns,
        n_train=len(Z),
        iterations=iterations,
        kkt_residual=residual,
        seed=seed,
    )
    sums = _kernel_sums(model, Z[keep])
    model.rho = _offset(alpha[keep], sums, 1.0 / (config.nu * len(Z)))
    logger.info(
        f"OC-SVM trained: {int(keep.sum())} support vectors of {len(Z)}, "
        f"gamma={gamma:.4g}, nu={config.nu}, {iterations} SMO iterations"
    )
    return model


def _kernel_sums(model: OcsvmModel, Z: np.ndarray) -> np.ndarray:
    return rbf_kernel(Z, model.support_vectors, model.gamma) @ model.alpha


def decision_function(
    model: OcsvmModel, data: Union[Dataset, Telemetry, np.ndarray]
) -> np.ndarray:
    """``f(x)`` for raw-unit samples given in ``model.columns`` order."""
    if not model.is_trained:
        raise ModelError("OC-SVM has not been trained")
    if isinstance(data, (Dataset, Telemetry)):
        raw = _features(data, model.columns)
    else:
        raw = np.atleast_2d(np.asarray(data, dtype=float))
        if raw.shape[1] != len(model.columns):
            raise ModelError(
                f"expected {len(model.columns)} feature columns, got {raw.shape[1]}"
            )
    return _kernel_sums(model, standardize(raw, model.scaler)) - model.rho


def classify(
    model: OcsvmModel, data: Union[Dataset, Telemetry, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    """Labels (+1 healthy, -1 faulty) and decision values."""
    values = decision_function(model, data)
    return np.where(values >= 0, HEALTHY, FAULTY), values


def training_outlier_fraction(model: OcsvmModel, healthy: Dataset) -> float:
    labels, _ = classify(model, healthy)
    return float(np.mean(labels == FAULTY))


def armed_from(labels: Sequence[int], arm_samples: int = 0) -> Optional[int]:
    """First index after ``arm_samples`` consecutive healthy labels."""
    if arm_samples <= 0:
        return 0
    run = 0
    for k, label in enumerate(labels):
        run = run + 1 if label != FAULTY else 0
        if run >= arm_samples:
            return k + 1
    return None


def stable_detection(
    labels: Sequence[int], k_stable: int = 10, arm_samples: int = 0
) -> Optional[int]:
    """First index that starts ``k_stable`` consecutive faulty labels.

    Faulty runs only count once the detector has armed, i.e. after it has seen
    ``arm_samples`` consecutive healthy labels.
    """
    start = armed_from(labels, arm_samples)
    if start is None:
        return None
    run = 0
    for k, label in enumerate(labels[start:], start):
        run = run + 1 if label == FAULTY else 0
        if run >= k_stable:
            return k - k_stable + 1
    return None


def count_oscillations(labels: Sequence[int], until: Optional[int] = None) -> int:
    """Number of label sign changes before index ``until`` (default: all)."""
    labels = np.asarray(labels)[: until if until is not None else None]
    return int(np.sum(labels[1:] != labels[:-1]))


class OcsvmReport(BaseModel):
    n_frames: int
    k_stable: int
    arm_samples: int = 0
    armed_at: Optional[int] = 0
    detection: Optional[int] = None
    detection_time: Optional[float] = None
    first_faulty: Optional[int] = None
    oscillations: int = 0
    faulty_fraction: float = 0.0
    assumptions: Dict[str, Any] = Field(default_factory=dict)


def run_baseline(
    model: OcsvmModel,
    telemetry: Telemetry,
    k_stable: int = 10,
    arm_samples: int = 0,
) -> Tuple[OcsvmReport, np.ndarray, np.ndarray]:
    """Score every frame; returns the report, labels and decision values."""
    labels, values = classify(model, telemetry)
    armed = armed_from(labels, arm_samples)
    detection = stable_detection(labels, k_stable, arm_samples)
    faulty = np.flatnonzero(labels == FAULTY)
    if armed is None:
        logger.warning(
            f"OC-SVM never saw {arm_samples} consecutive healthy frames; "
            "no detection possible"
        )
    report = OcsvmReport(
        n_frames=len(labels),
        k_stable=k_stable,
        arm_samples=arm_samples,
        armed_at=armed,
        detection=detection,
        detection_time=float(telemetry.t[detection]) if detection is not None else None,
        first_faulty=int(faulty[0]) if len(faulty) else None,
        oscillations=count_oscillations(labels, detection),
        faulty_fraction=float(np.mean(labels == FAULTY)),
        assumptions={
            "features": list(model.columns),
            "kernel": "rbf",
            "gamma": model.gamma,
            "nu": model.nu,
            "k_stable": k_stable,
            "arm_samples": arm_samples,
        },
    )
    logger.info(
        f"OC-SVM stable detection at {detection} "
        f"({report.oscillations} oscillation(s) before it)"
    )
    return report, labels, values


class BaselineComparison(BaseModel):
    ocsvm_detection: Optional[int]
    derivative_detection: Optional[int]
    difference_samples: Optional[int]
    derivative_earlier_or_equal: bool
    k_stable: int
    ocsvm_oscillations: int = 0


def compare_detection(
    ocsvm_report: OcsvmReport, derivative_report: DetectionReport
) -> BaselineComparison:
    """Contrast stable OC-SVM detection with the combined derivative rule.

    The derivative side is its first crossing at or after the fault onset when
    the report knows the onset.

    ``difference_samples`` is OC-SVM detection minus derivative detection, so a
    positive value means the derivative rule fired first.
    """
    if ocsvm_report.n_frames != derivative_report.n_frames:
        raise DetectionError(
            f"reports cover different runs ({ocsvm_report.n_frames} vs "
            f"{derivative_report.n_frames} frames)"
        )
    ours = derivative_report.detection(RULE_COMBINED)
    theirs = ocsvm_report.detection
    if theirs is None:
        earlier = True
    else:
        earlier = ours is not None and ours <= theirs
    return BaselineComparison(
        ocsvm_detection=theirs,
        derivative_detection=ours,
        difference_samples=(
            theirs - ours if ours is not None and theirs is not None else None
        ),
        derivative_earlier_or_equal=earlier,
        k_stable=ocsvm_report.k_stable,
        ocsvm_oscillations=ocsvm_report.oscillations,
    )


def export_decisions(
    t: np.ndarray, values: np.ndarray, labels: np.ndarray, path: Union[str, Path]
) -> Path:
    """Write ``t,decision_value,label``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"t": t, "decision_value": values, "label": labels}).to_csv(
        path, index=False, float_format=FLOAT_FORMAT
    )
    return path


def save_ocsvm(model: OcsvmModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict()) + "\n")
    return path


def load_ocsvm(path: Union[str, Path]) -> OcsvmModel:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"OC-SVM file not found: {path}")
    try:
        return OcsvmModel.from_dict(json.loads(path.read_text()))
    except (KeyError, json.JSONDecodeError) as e:
        raise ModelError(f"{path}: not an OC-SVM model file ({e})") from e
