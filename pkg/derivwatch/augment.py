"""Variational autoencoder used to synthesize extra healthy training samples.

The model sees each sample as the standardized row ``(rpm, power, channels...)``
so both the operating inputs and the sensor targets are synthesized together.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .errors import DataError, ModelError, TrainingError
from .nn import DenseStack, clip_by_norm
from .prep import Dataset, ScalerParams, destandardize, standardize
from .telemetry import INPUT_COLUMNS

logger = logging.getLogger(__name__)

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


class VaeConfig(BaseModel):
    """Hidden width 32 on both sides and 400 epochs; the rest are local choices."""

    hidden_width: int = Field(default=32, ge=1)
    latent_dim: int = Field(default=4, ge=1)
    epochs: int = Field(default=400, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=32, ge=1)
    beta: float = Field(default=1.0, ge=0)
    clip_norm: float = Field(default=5.0, ge=0)
    decoder_activation: str = Field(default="relu", pattern="^(relu|linear)$")


class LossTerms(NamedTuple):
    total: float
    reconstruction: float
    kl: float


@dataclass
class VaeModel:
    encoder: DenseStack
    mu_head: DenseStack
    logvar_head: DenseStack
    decoder: DenseStack
    columns: Tuple[str, ...] = ()
    scaler: Optional[ScalerParams] = None
    config: VaeConfig = field(default_factory=VaeConfig)
    loss_history: List[float] = field(default_factory=list)
    seed: int = 0

    @property
    def n_columns(self) -> int:
        return self.encoder.n_inputs

    @property
    def latent_dim(self) -> int:
        return self.mu_head.n_outputs

    @property
    def trained(self) -> bool:
        return bool(self.loss_history) and self.scaler is not None

    @classmethod
    def initialize(
        cls,
        n_columns: int,
        config: VaeConfig,
        rng: np.random.Generator,
    ) -> "VaeModel":
        width, latent = config.hidden_width, config.latent_dim
        return cls(
            encoder=DenseStack.initialize([n_columns, width], ["relu"], rng),
            mu_head=DenseStack.initialize([width, latent], ["linear"], rng),
            logvar_head=DenseStack.initialize([width, latent], ["linear"], rng),
            decoder=DenseStack.initialize(
                [latent, width, n_columns],
                [config.decoder_activation, "linear"],
                rng,
            ),
            config=config,
        )

    def stacks(self) -> List[DenseStack]:
        return [self.encoder, self.mu_head, self.logvar_head, self.decoder]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "columns": list(self.columns),
            "config": self.config.model_dump(),
            "seed": self.seed,
            "loss_history": list(self.loss_history),
            "scaler": self.scaler.to_dict() if self.scaler else None,
            "encoder": self.encoder.to_dict(),
            "mu_head": self.mu_head.to_dict(),
            "logvar_head": self.logvar_head.to_dict(),
            "decoder": self.decoder.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VaeModel":
        scaler = data.get("scaler")
        return cls(
            encoder=DenseStack.from_dict(data["encoder"]),
            mu_head=DenseStack.from_dict(data["mu_head"]),
            logvar_head=DenseStack.from_dict(data["logvar_head"]),
            decoder=DenseStack.from_dict(data["decoder"]),
            columns=tuple(data.get("columns", ())),
            scaler=ScalerParams.from_dict(scaler) if scaler else None,
            config=VaeConfig(**data.get("config", {})),
            loss_history=list(data.get("loss_history", [])),
            seed=data.get("seed", 0),
        )


def _check_width(model: VaeModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    batch = x.reshape(1, -1) if x.ndim == 1 else x
    if batch.shape[1] != model.n_columns:
        raise ModelError(
            f"sample width {batch.shape[1]} does not match "
            f"model width {model.n_columns}"
        )
    return batch


def encode(model: VaeModel, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Latent mean and standard deviation for standardized sample(s)."""
    batch = _check_width(model, x)
    h = model.encoder(batch)
    mu = model.mu_head(h)
    logvar = np.clip(model.logvar_head(h), LOGVAR_MIN, LOGVAR_MAX)
    sigma = np.exp(0.5 * logvar)
    if np.asarray(x).ndim == 1:
        return mu[0], sigma[0]
    return mu, sigma


def reparameterize(mu: np.ndarray, sigma: np.ndarray, eps: np.ndarray) -> np.ndarray:
    mu, sigma, eps = (np.asarray(a, dtype=float) for a in (mu, sigma, eps))
    if not (mu.shape == sigma.shape == eps.shape):
        raise ValueError(
            f"shape mismatch: mu {mu.shape}, sigma {sigma.shape}, eps {eps.shape}"
        )
    return mu + sigma * eps


def kl_term(mu: np.ndarray, sigma: np.ndarray) -> float:
    """Mean over the batch of KL(N(mu, sigma^2) || N(0, 1)) summed over latents."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    var = sigma * sigma
    with np.errstate(divide="ignore"):
        log_var = np.log(var)
    per_sample = 0.5 * np.sum(mu * mu + var - 1.0 - log_var, axis=1)
    return float(np.mean(per_sample))


def loss(model: VaeModel, batch: np.ndarray, draws: np.ndarray) -> LossTerms:
    """Negative evidence lower bound for one batch and its noise draws.

    ``reconstruction`` is the squared error summed over the columns of a row
    and averaged over the rows, i.e. ``n_columns`` times the per-cell mean
    squared error. ``kl`` is summed over latents and averaged over the rows,
    so both terms are on the same per-sample scale.
    """
    return loss_and_gradients(model, batch, draws, with_gradients=False)[0]


def loss_and_gradients(
    model: VaeModel,
    batch: np.ndarray,
    draws: np.ndarray,
    with_gradients: bool = True,
) -> Tuple[LossTerms, Optional[List[Tuple[List[np.ndarray], List[np.ndarray]]]]]:
    """Loss terms and per-stack ``(grads_w, grads_b)`` in ``model.stacks()`` order.

    The reconstruction term is the squared error summed over columns and
    averaged over the batch; the KL term is likewise averaged over the batch.
    """
    x = _check_width(model, batch)
    if len(x) == 0:
        raise DataError("loss needs a non-empty batch")
    eps = np.asarray(draws, dtype=float).reshape(len(x), model.latent_dim)
    n = len(x)
    beta = model.config.beta

    h, cache_enc = model.encoder.forward(x)
    mu, cache_mu = model.mu_head.forward(h)
    raw_logvar, cache_lv = model.logvar_head.forward(h)
    logvar = np.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    g, cache_dec = model.decoder.forward(z)

    residual = g - x
    reconstruction = float(np.sum(residual * residual) / n)
    kl = float(np.sum(0.5 * (mu * mu + np.exp(logvar) - 1.0 - logvar)) / n)
    terms = LossTerms(
        total=reconstruction + beta * kl, reconstruction=reconstruction, kl=kl
    )
    if not with_gradients:
        return terms, None

    gw_dec, gb_dec, grad_z = model.decoder.backward(cache_dec, 2.0 * residual / n)
    grad_mu = grad_z + beta * mu / n
    grad_logvar = grad_z * eps * 0.5 * sigma + beta * 0.5 * (np.exp(logvar) - 1.0) / n
    grad_logvar = np.where(
        (raw_logvar > LOGVAR_MIN) & (raw_logvar < LOGVAR_MAX), grad_logvar, 0.0
    )
    gw_mu, gb_mu, grad_h_mu = model.mu_head.backward(cache_mu, grad_mu)
    gw_lv, gb_lv, grad_h_lv = model.logvar_head.backward(cache_lv, grad_logvar)
    gw_enc, gb_enc, _ = model.encoder.backward(cache_enc, grad_h_mu + grad_h_lv)
    grads = [(gw_enc, gb_enc), (gw_mu, gb_mu), (gw_lv, gb_lv), (gw_dec, gb_dec)]
    return terms, grads


def _step(model: VaeModel, grads, rate: float, clip_norm: float) -> None:
    flat = [g for gw, gb in grads for g in (*gw, *gb)]
    clipped = iter(clip_by_norm(flat, clip_norm))
    for stack, (gw, gb) in zip(model.stacks(), grads):
        new_w = [next(clipped) for _ in gw]
        new_b = [next(clipped) for _ in gb]
        stack.step(new_w, new_b, rate)


def train_vae(
    dataset: Dataset,
    config: Optional[VaeConfig] = None,
    seed: int = 0,
) -> VaeModel:
    """Fit the VAE on the joint (inputs, targets) rows of ``dataset``."""
    config = config or VaeConfig()
    if len(dataset) < 2:
        raise DataError(f"VAE training needs at least 2 samples, got {len(dataset)}")
    matrix = dataset.matrix
    scaler = ScalerParams.fit(matrix, dataset.columns).with_unit_floor()
    data = standardize(matrix, scaler)

    rng = np.random.default_rng(seed)
    model = VaeModel.initialize(data.shape[1], config, rng)
    model = replace(model, columns=dataset.columns, scaler=scaler, seed=seed)
    n = len(data)
    history: List[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            eps = rng.standard_normal((len(rows), config.latent_dim))
            terms, grads = loss_and_gradients(model, data[rows], eps)
            if not np.isfinite(terms.total):
                raise TrainingError(
                    f"VAE loss became non-finite at epoch {epoch + 1} "
                    f"(reconstruction {terms.reconstruction}, kl {terms.kl})"
                )
            _step(model, grads, config.learning_rate, config.clip_norm)
            total += terms.total * len(rows)
        history.append(total / n)
        logger.debug(f"VAE epoch {epoch + 1}/{config.epochs}: loss {history[-1]:.6g}")

    model.loss_history = history
    logger.info(
        f"VAE trained on {n} samples: loss {history[0]:.4g} -> {history[-1]:.4g}"
    )
    return model


def generate(
    model: VaeModel, count: int, seed: int = 0, start_index: int = 0
) -> Dataset:
    """Decode ``count`` standard-normal latent draws into raw-unit samples."""
    if not model.trained:
        raise ModelError("VAE has not been trained")
    if count < 0:
        raise DataError(f"sample count must be >= 0, got {count}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, model.latent_dim))
    if count:
        rows = destandardize(model.decoder(z), model.scaler)
    else:
        rows = np.empty((0, model.n_columns))
    n_inputs = len(INPUT_COLUMNS)
    return Dataset.from_arrays(
        rows[:, :n_inputs],
        rows[:, n_inputs:],
        model.columns[n_inputs:],
        synthetic=True,
        start_index=start_index,
    )


def augment(
    dataset: Dataset,
    model: VaeModel,
    count: Optional[int] = None,
    seed: int = 0,
    start_index: Optional[int] = None,
) -> Dataset:
    """Real rows followed by ``count`` synthetic rows (default: as many as real).

    Synthetic rows are numbered from ``start_index``, or from one past the
    largest real index when it is not given.
    """
    count = len(dataset) if count is None else count
    if model.columns[len(INPUT_COLUMNS):] != dataset.channels:
        raise DataError(
            f"VAE was trained on {list(model.columns)}, "
            f"dataset has {list(dataset.columns)}"
        )
    if start_index is None:
        start_index = int(dataset.index.max()) + 1 if len(dataset) else 0
    synthetic = generate(model, count, seed, start_index=start_index)
    combined = dataset.concat(synthetic).fit_scalers()
    logger.info(
        f"Augmented {len(dataset)} real samples with {count} synthetic "
        f"({len(combined)} total)"
    )
    return combined


def save_vae(model: VaeModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict()) + "\n")
    return path


def load_vae(path: Union[str, Path]) -> VaeModel:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"VAE file not found: {path}")
    try:
        return VaeModel.from_dict(json.loads(path.read_text()))
    except (KeyError, json.JSONDecodeError) as e:
        raise ModelError(f"{path}: not a VAE model file ({e})") from e
