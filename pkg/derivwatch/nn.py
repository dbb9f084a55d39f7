"""Dense layer stacks with hand-written backpropagation.

Shared by the healthy-behaviour MLP and the augmentation VAE. Rows are
samples; a stack is a list of affine layers each followed by an activation.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .errors import ModelError

ACTIVATIONS = ("relu", "linear")

LayerCache = List[Tuple[np.ndarray, np.ndarray]]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    return relu(pre) if activation == "relu" else pre


def _activation_grad(pre: np.ndarray, activation: str) -> np.ndarray:
    return (pre > 0).astype(float) if activation == "relu" else np.ones_like(pre)


@dataclass
class DenseStack:
    """Affine layers ``h_{l+1} = f_l(h_l W_l + b_l)``."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: List[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ModelError("weights, biases and activations must align")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ModelError(f"unknown activation '{a}'")
        for w, nxt in zip(self.weights, self.weights[1:]):
            if w.shape[1] != nxt.shape[0]:
                raise ModelError(f"layer widths do not chain: {w.shape} -> {nxt.shape}")

    @classmethod
    def initialize(
        cls,
        widths: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
    ) -> "DenseStack":
        """He-normal weights for rectifier layers, Glorot-normal otherwise."""
        weights, biases = [], []
        for fan_in, fan_out, activation in zip(widths, widths[1:], activations):
            if activation == "relu":
                scale = np.sqrt(2.0 / fan_in)
            else:
                scale = np.sqrt(2.0 / (fan_in + fan_out))
            weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases, activations=list(activations))

    @classmethod
    def zeros(cls, widths: Sequence[int], activations: Sequence[str]) -> "DenseStack":
        return cls(
            weights=[np.zeros((a, b)) for a, b in zip(widths, widths[1:])],
            biases=[np.zeros(b) for b in widths[1:]],
            activations=list(activations),
        )

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> List[int]:
        return [self.n_inputs] + [w.shape[1] for w in self.weights]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, LayerCache]:
        cache: LayerCache = []
        h = x
        for w, b, activation in zip(self.weights, self.biases, self.activations):
            pre = h @ w + b
            cache.append((h, pre))
            h = _activate(pre, activation)
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(
        self, cache: LayerCache, grad_out: np.ndarray
    ) -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
        """Gradients of a scalar loss given dL/d(output)."""
        grads_w: List[np.ndarray] = [None] * len(self.weights)
        grads_b: List[np.ndarray] = [None] * len(self.weights)
        grad = grad_out
        for layer in reversed(range(len(self.weights))):
            h_in, pre = cache[layer]
            grad = grad * _activation_grad(pre, self.activations[layer])
            grads_w[layer] = h_in.T @ grad
            grads_b[layer] = grad.sum(axis=0)
            grad = grad @ self.weights[layer].T
        return grads_w, grads_b, grad

    def parameters(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def step(
        self, grads_w: List[np.ndarray], grads_b: List[np.ndarray], rate: float
    ) -> None:
        for layer in range(len(self.weights)):
            self.weights[layer] -= rate * grads_w[layer]
            self.biases[layer] -= rate * grads_b[layer]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())

    def copy(self) -> "DenseStack":
        return DenseStack(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=list(self.activations),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "activations": list(self.activations),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DenseStack":
        return cls(
            weights=[np.array(w, dtype=float) for w in data["weights"]],
            biases=[np.array(b, dtype=float) for b in data["biases"]],
            activations=list(data["activations"]),
        )


def clip_by_norm(grads: List[np.ndarray], max_norm: float) -> List[np.ndarray]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    if max_norm is None or max_norm <= 0:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]
