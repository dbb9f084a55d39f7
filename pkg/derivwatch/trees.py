"""Regression trees and bagged forests, plus the classic split statistics.

Trees are grown with the squared-error criterion summed over every target
channel and stored as flat node arrays (``feature == -1`` marks a leaf), so
prediction descends all query points level by level.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .errors import DataError, ModelError
from .prep import Dataset

logger = logging.getLogger(__name__)

LEAF = -1


def _check_probabilities(p: Sequence[float]) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probability vector must be a non-empty 1-D sequence")
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"probabilities must be finite and >= 0, got {p.tolist()}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities must sum to 1, got {p.sum()!r}")
    return p


def entropy(class_probabilities: Sequence[float]) -> float:
    """Shannon entropy in bits, with 0*log2(0) taken as 0."""
    p = _check_probabilities(class_probabilities)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz)))


def gini(class_fractions: Sequence[float]) -> float:
    """Gini impurity 1 - sum(p_i^2)."""
    p = _check_probabilities(class_fractions)
    return float(1.0 - np.sum(p * p))


class TreeHyperparameters(BaseModel):
    """Squared-error regression tree: split at 2 samples, leaves of 1, no depth cap."""

    criterion: str = Field(default="squared_error", pattern="^squared_error$")
    min_samples_split: int = Field(default=2, ge=2)
    min_samples_leaf: int = Field(default=1, ge=1)
    max_depth: Optional[int] = Field(default=None, ge=1)
    max_features: Optional[int] = Field(default=None, ge=1)


class ForestHyperparameters(TreeHyperparameters):
    """50 bootstrapped members, one candidate feature per split."""

    n_estimators: int = Field(default=50, ge=1)
    max_features: Optional[int] = Field(default=1, ge=1)
    bootstrap: bool = True
    n_jobs: int = Field(default=1, ge=1)


@dataclass
class DecisionTreeModel:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_node_samples: np.ndarray
    channels: Tuple[str, ...]
    hyperparameters: TreeHyperparameters = field(default_factory=TreeHyperparameters)
    kind = "tree"

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for node in range(self.n_nodes):
            if self.feature[node] != LEAF:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max()) if self.n_nodes else 0

    @property
    def is_trained(self) -> bool:
        return self.n_nodes > 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Index of the leaf reached by every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        nodes = np.zeros(len(X), dtype=int)
        active = self.feature[nodes] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            current = nodes[rows]
            go_left = X[rows, self.feature[current]] <= self.threshold[current]
            nodes[rows] = np.where(go_left, self.left[current], self.right[current])
            active[rows] = self.feature[nodes[rows]] != LEAF
        return nodes

    def predict(self, X: np.ndarray) -> np.ndarray:
        if not self.is_trained:
            raise ModelError("decision tree has not been trained")
        return self.value[self.apply(X)]

    @classmethod
    def leaf(
        cls, value: Sequence[float], channels: Sequence[str]
    ) -> "DecisionTreeModel":
        """A single-leaf tree predicting ``value`` everywhere."""
        return cls(
            feature=np.array([LEAF]),
            threshold=np.array([np.nan]),
            left=np.array([LEAF]),
            right=np.array([LEAF]),
            value=np.asarray(value, dtype=float).reshape(1, -1),
            n_node_samples=np.array([0]),
            channels=tuple(channels),
        )

    def to_dict(self) -> Dict[str, Any]:
        nodes = []
        for i in range(self.n_nodes):
            record: Dict[str, Any] = {"id": i, "samples": int(self.n_node_samples[i])}
            if self.feature[i] == LEAF:
                record["value"] = self.value[i].tolist()
            else:
                record.update(
                    feature=int(self.feature[i]),
                    threshold=float(self.threshold[i]),
                    left=int(self.left[i]),
                    right=int(self.right[i]),
                    value=self.value[i].tolist(),
                )
            nodes.append(record)
        return {
            "channels": list(self.channels),
            "hyperparameters": self.hyperparameters.model_dump(),
            "nodes": nodes,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DecisionTreeModel":
        nodes = sorted(data["nodes"], key=lambda r: r["id"])
        return cls(
            feature=np.array([r.get("feature", LEAF) for r in nodes], dtype=int),
            threshold=np.array(
                [r.get("threshold", np.nan) for r in nodes], dtype=float
            ),
            left=np.array([r.get("left", LEAF) for r in nodes], dtype=int),
            right=np.array([r.get("right", LEAF) for r in nodes], dtype=int),
            value=np.array([r["value"] for r in nodes], dtype=float),
            n_node_samples=np.array([r.get("samples", 0) for r in nodes], dtype=int),
            channels=tuple(data["channels"]),
            hyperparameters=TreeHyperparameters(**data.get("hyperparameters", {})),
        )


@dataclass
class _Split:
    feature: int
    threshold: float
    sse: float


def _best_split(
    X: np.ndarray,
    Y: np.ndarray,
    idx: np.ndarray,
    hyper: TreeHyperparameters,
    rng: Optional[np.random.Generator],
) -> Optional[_Split]:
    """Lowest total child squared error over midpoint thresholds.

    Features are visited in index order (or a random order when
    ``max_features`` limits the candidates); ties keep the earlier feature and
    the lower threshold. Features that are constant in the node do not count
    towards ``max_features``.
    """
    targets = Y[idx]
    if np.all(targets == targets[0]):
        return None
    centered = targets - targets.mean(axis=0)
    parent_sse = float(np.sum(centered * centered))

    n_features = X.shape[1]
    limit = hyper.max_features
    if limit is not None and limit < n_features and rng is not None:
        candidates = rng.permutation(n_features)
    else:
        candidates = np.arange(n_features)
        limit = None

    m = len(idx)
    left_sizes = np.arange(1, m, dtype=float)
    min_leaf = hyper.min_samples_leaf
    size_ok = (left_sizes >= min_leaf) & (m - left_sizes >= min_leaf)

    best: Optional[_Split] = None
    visited = 0
    for f in candidates:
        if limit is not None and visited >= limit and best is not None:
            break
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        if xs_sorted[0] == xs_sorted[-1]:
            continue
        visited += 1

        yc = centered[order]
        csum = np.cumsum(yc, axis=0)
        csq = np.cumsum(np.sum(yc * yc, axis=1))
        left_sum = csum[:-1]
        right_sum = csum[-1] - left_sum
        left_sse = csq[:-1] - np.sum(left_sum * left_sum, axis=1) / left_sizes
        right_sse = (csq[-1] - csq[:-1]) - np.sum(
            right_sum * right_sum, axis=1
        ) / (m - left_sizes)
        valid = size_ok & (xs_sorted[1:] > xs_sorted[:-1])
        if not valid.any():
            continue
        total = np.maximum(left_sse, 0) + np.maximum(right_sse, 0)
        sse = np.where(valid, total, np.inf)
        pos = int(np.argmin(sse))
        if best is None or sse[pos] < best.sse:
            lo, hi = xs_sorted[pos], xs_sorted[pos + 1]
            threshold = lo + (hi - lo) / 2.0
            if not lo <= threshold < hi:
                threshold = lo
            best = _Split(int(f), float(threshold), float(sse[pos]))

    if best is None or not best.sse < parent_sse * (1.0 - 1e-12):
        return None
    return best


def _grow(
    X: np.ndarray,
    Y: np.ndarray,
    hyper: TreeHyperparameters,
    rng: Optional[np.random.Generator],
    channels: Sequence[str],
) -> DecisionTreeModel:
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[np.ndarray] = []
    samples: List[int] = []

    def new_node(idx: np.ndarray) -> int:
        feature.append(LEAF)
        threshold.append(np.nan)
        left.append(LEAF)
        right.append(LEAF)
        value.append(Y[idx].mean(axis=0))
        samples.append(len(idx))
        return len(feature) - 1

    root = new_node(np.arange(len(X)))
    stack = [(root, np.arange(len(X)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if len(idx) < hyper.min_samples_split:
            continue
        if hyper.max_depth is not None and depth >= hyper.max_depth:
            continue
        split = _best_split(X, Y, idx, hyper, rng)
        if split is None:
            continue
        goes_left = X[idx, split.feature] <= split.threshold
        left_idx, right_idx = idx[goes_left], idx[~goes_left]
        feature[node] = split.feature
        threshold[node] = split.threshold
        left[node] = new_node(left_idx)
        right[node] = new_node(right_idx)
        stack.append((right[node], right_idx, depth + 1))
        stack.append((left[node], left_idx, depth + 1))

    return DecisionTreeModel(
        feature=np.array(feature, dtype=int),
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=int),
        right=np.array(right, dtype=int),
        value=np.vstack(value),
        n_node_samples=np.array(samples, dtype=int),
        channels=tuple(channels),
        hyperparameters=hyper,
    )


def _check_training_data(train: Dataset, hyper: TreeHyperparameters) -> None:
    if len(train) == 0:
        raise DataError("cannot train on an empty dataset")


def train_tree(
    train: Dataset,
    hyper: Optional[TreeHyperparameters] = None,
    seed: int = 0,
) -> DecisionTreeModel:
    """Grow one regression tree on the raw-unit targets."""
    hyper = hyper or TreeHyperparameters()
    _check_training_data(train, hyper)
    rng = np.random.default_rng(seed)
    tree = _grow(train.X, train.Y, hyper, rng, train.channels)
    logger.debug(
        f"Tree grown on {len(train)} samples: {tree.n_nodes} nodes, "
        f"{tree.n_leaves} leaves, depth {tree.depth}"
    )
    return tree


@dataclass
class RandomForestModel:
    trees: List[DecisionTreeModel]
    channels: Tuple[str, ...]
    hyperparameters: ForestHyperparameters = field(
        default_factory=ForestHyperparameters
    )
    seed: int = 0
    kind = "forest"

    @property
    def is_trained(self) -> bool:
        return bool(self.trees)

    def member_predictions(self, X: np.ndarray) -> np.ndarray:
        return np.stack([tree.predict(X) for tree in self.trees])

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Arithmetic mean of the member predictions."""
        if not self.is_trained:
            raise ModelError("random forest has not been trained")
        return np.mean(self.member_predictions(X), axis=0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "channels": list(self.channels),
            "hyperparameters": self.hyperparameters.model_dump(),
            "seed": self.seed,
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RandomForestModel":
        return cls(
            trees=[DecisionTreeModel.from_dict(t) for t in data["trees"]],
            channels=tuple(data["channels"]),
            hyperparameters=ForestHyperparameters(**data.get("hyperparameters", {})),
            seed=data.get("seed", 0),
        )


def _fit_member(
    X: np.ndarray,
    Y: np.ndarray,
    hyper: ForestHyperparameters,
    seed: int,
    member: int,
    channels: Tuple[str, ...],
) -> DecisionTreeModel:
    # each member owns a stream derived from (seed, member) only
    rng = np.random.default_rng([seed, member])
    if hyper.bootstrap:
        rows = rng.integers(0, len(X), size=len(X))
        X, Y = X[rows], Y[rows]
    tree_hyper = TreeHyperparameters(
        **hyper.model_dump(include=set(TreeHyperparameters.model_fields))
    )
    return _grow(X, Y, tree_hyper, rng, channels)


def train_forest(
    train: Dataset,
    hyper: Optional[ForestHyperparameters] = None,
    seed: int = 0,
) -> RandomForestModel:
    """Bagging: every member sees its own bootstrap resample of ``train``."""
    hyper = hyper or ForestHyperparameters()
    _check_training_data(train, hyper)
    args = [
        (train.X, train.Y, hyper, seed, member, train.channels)
        for member in range(hyper.n_estimators)
    ]
    if hyper.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=hyper.n_jobs) as pool:
            trees = list(pool.map(_fit_member, *zip(*args)))
    else:
        trees = [_fit_member(*a) for a in args]
    logger.debug(
        f"Forest of {len(trees)} trees trained on {len(train)} samples "
        f"(mean {np.mean([t.n_leaves for t in trees]):.0f} leaves)"
    )
    return RandomForestModel(
        trees=trees, channels=train.channels, hyperparameters=hyper, seed=seed
    )
