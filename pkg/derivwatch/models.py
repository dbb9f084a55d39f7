"""One predictor interface over the tree, forest and network regressors."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from .errors import DataError, EmptyDatasetError, ModelError
from .network import MlpHyperparameters, MlpModel, train_mlp
from .prep import Dataset
from .trees import (
    DecisionTreeModel,
    ForestHyperparameters,
    RandomForestModel,
    TreeHyperparameters,
    train_forest,
    train_tree,
)

logger = logging.getLogger(__name__)

RegressorModel = Union[DecisionTreeModel, RandomForestModel, MlpModel]

# tie-break order for selection
MODEL_KINDS = ("forest", "tree", "network")

_MODEL_CLASSES = {
    "tree": DecisionTreeModel,
    "forest": RandomForestModel,
    "network": MlpModel,
}


class ModelHyperparameters(BaseModel):
    tree: TreeHyperparameters = TreeHyperparameters()
    forest: ForestHyperparameters = ForestHyperparameters()
    network: MlpHyperparameters = MlpHyperparameters()


def predict(model: RegressorModel, x: np.ndarray) -> np.ndarray:
    """Expected healthy sensor values for one operating point or a batch.

    A single ``(rpm, power)`` pair returns a 1-D vector; a matrix of pairs
    returns one row per pair.
    """
    if not getattr(model, "is_trained", False):
        raise ModelError(f"{type(model).__name__} has not been trained")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != 2:
        raise ModelError(f"expected (rpm, power) inputs, got {X.shape[1]} columns")
    if not np.all(np.isfinite(X)):
        raise ModelError("operating point contains non-finite values")
    out = model.predict(X)
    return out[0] if single else out


def dataset_digest(dataset: Dataset) -> str:
    h = hashlib.sha256()
    h.update(",".join(dataset.channels).encode())
    for array in (dataset.X, dataset.Y):
        h.update(np.ascontiguousarray(array, dtype=float).tobytes())
    return h.hexdigest()


class MseTable(BaseModel):
    """Per-channel mean squared error of one model on one partition."""

    model: str
    channels: List[str]
    mse: List[float]
    variance: List[float]
    aggregate: float
    normalized_aggregate: float

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.channels, self.mse))


def evaluate_mse(
    model: RegressorModel, test: Dataset, name: Optional[str] = None
) -> MseTable:
    """MSE per channel, their raw sum, and the sum normalized by channel variance."""
    if len(test) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    if tuple(model.channels) != tuple(test.channels):
        raise DataError(
            f"model predicts {list(model.channels)} but data has {list(test.channels)}"
        )
    residual = predict(model, test.X) - test.Y
    mse = np.mean(residual * residual, axis=0)
    variance = np.var(test.Y, axis=0)
    scale = np.where(variance > 0, variance, 1.0)
    return MseTable(
        model=name or model.kind,
        channels=list(test.channels),
        mse=mse.tolist(),
        variance=variance.tolist(),
        aggregate=float(mse.sum()),
        normalized_aggregate=float(np.sum(mse / scale)),
    )


def select_model(tables: Mapping[str, MseTable]) -> str:
    """Name of the model with the lowest normalized aggregate test MSE."""
    if not tables:
        raise ModelError("no models to select from")
    ranked = sorted(
        tables,
        key=lambda name: (
            tables[name].normalized_aggregate,
            MODEL_KINDS.index(name) if name in MODEL_KINDS else len(MODEL_KINDS),
        ),
    )
    chosen = ranked[0]
    logger.info(
        f"Selected {chosen} (normalized test MSE "
        f"{tables[chosen].normalized_aggregate:.6g})"
    )
    return chosen


def train_model(
    kind: str,
    train: Dataset,
    hyper: Optional[ModelHyperparameters] = None,
    seed: int = 0,
) -> RegressorModel:
    hyper = hyper or ModelHyperparameters()
    if kind == "tree":
        return train_tree(train, hyper.tree, seed)
    if kind == "forest":
        return train_forest(train, hyper.forest, seed)
    if kind == "network":
        return train_mlp(train, hyper.network, seed)
    raise ModelError(f"unknown model kind '{kind}'; expected one of {MODEL_KINDS}")


class ModelManifest(BaseModel):
    kind: str
    channels: List[str]
    hyperparameters: Dict[str, Any]
    seed: int = 0
    training_digest: Optional[str] = None
    scaler_file: Optional[str] = None


def save_model(
    model: RegressorModel,
    path: Union[str, Path],
    training_digest: Optional[str] = None,
    scaler_file: Optional[str] = None,
) -> Path:
    """Write ``{"manifest": ..., "model": ...}`` as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = ModelManifest(
        kind=model.kind,
        channels=list(model.channels),
        hyperparameters=model.hyperparameters.model_dump(),
        seed=getattr(model, "seed", 0),
        training_digest=training_digest,
        scaler_file=scaler_file,
    )
    payload = {"manifest": manifest.model_dump(), "model": model.to_dict()}
    path.write_text(json.dumps(payload) + "\n")
    logger.debug(f"Saved {model.kind} model to {path}")
    return path


def read_manifest(path: Union[str, Path]) -> ModelManifest:
    return ModelManifest(**_read_payload(path)["manifest"])


def load_model(path: Union[str, Path]) -> RegressorModel:
    payload = _read_payload(path)
    manifest = ModelManifest(**payload["manifest"])
    cls = _MODEL_CLASSES.get(manifest.kind)
    if cls is None:
        raise ModelError(f"{path}: unknown model kind '{manifest.kind}'")
    return cls.from_dict(payload["model"])


def _read_payload(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"model file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelError(f"{path}: not valid JSON ({e})") from e
    if "manifest" not in payload or "model" not in payload:
        raise ModelError(f"{path}: missing 'manifest' or 'model' section")
    return payload


def train_all(
    train: Dataset,
    hyper: Optional[ModelHyperparameters] = None,
    seeds: Optional[Mapping[str, int]] = None,
    kinds: Sequence[str] = MODEL_KINDS,
) -> Dict[str, RegressorModel]:
    """Train every requested kind; results are keyed by kind in fixed order."""
    seeds = seeds or {}
    trained: Dict[str, RegressorModel] = {}
    for kind in kinds:
        trained[kind] = train_model(kind, train, hyper, seeds.get(kind, 0))
    return trained


def mse_tables(
    models: Mapping[str, RegressorModel], data: Dataset
) -> Dict[str, MseTable]:
    return {name: evaluate_mse(m, data, name) for name, m in models.items()}
