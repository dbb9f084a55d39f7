"""Multilayer perceptron regressor trained by stochastic gradient descent."""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .errors import DataError, ModelError, TrainingError
from .nn import DenseStack
from .prep import Dataset, ScalerParams, destandardize, standardize
from .telemetry import INPUT_COLUMNS

logger = logging.getLogger(__name__)


class MlpHyperparameters(BaseModel):
    """Three rectifier hidden layers of 32, 24 and 12 units.

    Plain SGD at 0.01 over mini-batches of 32 for 100 epochs;
    ``config/full-scale.yaml`` trains sample by sample for 200.
    """

    hidden_layers: List[int] = Field(default_factory=lambda: [32, 24, 12])
    learning_rate: float = Field(default=0.01, gt=0)
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=32, ge=1)


@dataclass
class MlpModel:
    stack: DenseStack
    input_scaler: ScalerParams
    target_scaler: ScalerParams
    channels: Tuple[str, ...]
    hyperparameters: MlpHyperparameters = field(default_factory=MlpHyperparameters)
    loss_history: List[float] = field(default_factory=list)
    seed: int = 0
    kind = "network"

    @property
    def is_trained(self) -> bool:
        return bool(self.loss_history)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Destandardized network output for raw (rpm, power) rows."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.stack.n_inputs:
            raise ModelError(
                f"expected {self.stack.n_inputs} input columns, got {X.shape[1]}"
            )
        out = self.stack(standardize(X, self.input_scaler))
        return destandardize(out, self.target_scaler)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "channels": list(self.channels),
            "hyperparameters": self.hyperparameters.model_dump(),
            "seed": self.seed,
            "loss_history": list(self.loss_history),
            "input_scaler": self.input_scaler.to_dict(),
            "target_scaler": self.target_scaler.to_dict(),
            "layers": self.stack.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MlpModel":
        return cls(
            stack=DenseStack.from_dict(data["layers"]),
            input_scaler=ScalerParams.from_dict(data["input_scaler"]),
            target_scaler=ScalerParams.from_dict(data["target_scaler"]),
            channels=tuple(data["channels"]),
            hyperparameters=MlpHyperparameters(**data.get("hyperparameters", {})),
            loss_history=list(data.get("loss_history", [])),
            seed=data.get("seed", 0),
        )


def build_stack(
    n_inputs: int,
    n_outputs: int,
    hidden_layers: List[int],
    rng: np.random.Generator,
) -> DenseStack:
    widths = [n_inputs] + list(hidden_layers) + [n_outputs]
    activations = ["relu"] * len(hidden_layers) + ["linear"]
    return DenseStack.initialize(widths, activations, rng)


def loss_and_gradients(
    stack: DenseStack, X: np.ndarray, Y: np.ndarray
) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """Mean squared error over every output cell and its parameter gradients."""
    out, cache = stack.forward(X)
    residual = out - Y
    loss = float(np.mean(residual * residual))
    grad_out = 2.0 * residual / residual.size
    grads_w, grads_b, _ = stack.backward(cache, grad_out)
    return loss, grads_w, grads_b


def train_mlp(
    train: Dataset,
    hyper: Optional[MlpHyperparameters] = None,
    seed: int = 0,
    epochs: Optional[int] = None,
) -> MlpModel:
    """Fit the network on standardized inputs and targets.

    Every epoch visits the rows in a fresh permutation drawn from the seeded
    generator and applies one update per mini-batch. The recorded loss is the
    full-data MSE after the epoch, in standardized units.
    """
    hyper = hyper or MlpHyperparameters()
    if epochs is not None:
        hyper = hyper.model_copy(update={"epochs": epochs})
    if len(train) == 0:
        raise DataError("cannot train on an empty dataset")

    input_scaler = ScalerParams.fit(train.X, INPUT_COLUMNS).with_unit_floor()
    target_scaler = ScalerParams.fit(train.Y, train.channels).with_unit_floor()
    X = standardize(train.X, input_scaler)
    Y = standardize(train.Y, target_scaler)

    rng = np.random.default_rng(seed)
    stack = build_stack(X.shape[1], Y.shape[1], hyper.hidden_layers, rng)
    history: List[float] = []
    n = len(X)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            rows = order[start : start + hyper.batch_size]
            _, grads_w, grads_b = loss_and_gradients(stack, X[rows], Y[rows])
            stack.step(grads_w, grads_b, hyper.learning_rate)
        residual = stack(X) - Y
        epoch_loss = float(np.mean(residual * residual))
        if not np.isfinite(epoch_loss) or not stack.is_finite():
            raise TrainingError(
                f"network loss became non-finite at epoch {epoch + 1} "
                f"(learning rate {hyper.learning_rate})"
            )
        history.append(epoch_loss)
        logger.debug(f"MLP epoch {epoch + 1}/{hyper.epochs}: loss {epoch_loss:.6g}")

    logger.info(
        f"MLP trained on {n} samples for {hyper.epochs} epochs, "
        f"final loss {history[-1]:.6g}"
    )
    return MlpModel(
        stack=stack,
        input_scaler=input_scaler,
        target_scaler=target_scaler,
        channels=train.channels,
        hyperparameters=hyper,
        loss_history=history,
        seed=seed,
    )
