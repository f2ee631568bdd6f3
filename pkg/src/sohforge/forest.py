"""From-scratch random-forest regression.

CART trees with variance-reduction (MSE) splits, thresholds at
midpoints of consecutive distinct sorted feature values, seeded
bootstrap resampling per tree, and impurity-decrease feature
importances. Used to fuse the two CNN outputs and as the regressor on
incremental-capacity features.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTargets, ShapeMismatch, ZeroImportance
from .seeding import rng_for

FOREST_FORMAT = "sohforge-forest-v1"

DEFAULT_N_TREES = 100
DEFAULT_MAX_DEPTH = 8
DEFAULT_MIN_SAMPLES_LEAF = 5


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = DEFAULT_N_TREES
    max_depth: int = DEFAULT_MAX_DEPTH
    min_samples_leaf: int = DEFAULT_MIN_SAMPLES_LEAF
    features_per_split: int | str = "all"
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.features_per_split != "all":
            if not isinstance(self.features_per_split, int) or self.features_per_split < 1:
                raise ValueError(
                    f'features_per_split must be "all" or a positive int, '
                    f"got {self.features_per_split!r}"
                )


@dataclass(frozen=True)
class TreeNode:
    """Internal node (feature >= 0) or leaf (feature == -1, value = mean)."""

    feature: int
    threshold: float
    left: int
    right: int
    value: float

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


def _leaf(value: float) -> TreeNode:
    return TreeNode(-1, 0.0, -1, -1, float(value))


@dataclass(frozen=True)
class ForestModel:
    trees: tuple[tuple[TreeNode, ...], ...]
    feature_importances: np.ndarray
    n_features: int
    config: ForestConfig

    def __post_init__(self):
        fi = np.array(self.feature_importances, dtype=np.float64)
        if fi.shape != (self.n_features,):
            raise ShapeMismatch(
                f"importances must have shape ({self.n_features},), got {fi.shape}"
            )
        if np.any(fi < 0) or not np.all(np.isfinite(fi)):
            raise ValueError("importances must be finite and non-negative")
        total = float(fi.sum())
        if total != 0.0 and abs(total - 1.0) > 1e-9:
            raise ValueError(f"importances must sum to 1 (or all be 0), got {total}")
        fi.flags.writeable = False
        object.__setattr__(self, "feature_importances", fi)


def _best_split(x_col: np.ndarray, y: np.ndarray, min_leaf: int):
    """Best (gain, threshold) for one feature via prefix-sum SSE scan.

    Returns (-inf, nan) when no valid split exists. Candidates are the
    midpoints between consecutive distinct sorted values; a candidate is
    valid when both sides keep min_leaf samples.
    """
    order = np.argsort(x_col, kind="stable")
    xs = x_col[order]
    ys = y[order]
    n = ys.size
    csum = np.cumsum(ys)
    csq = np.cumsum(ys * ys)
    total_sum = csum[-1]
    total_sq = csq[-1]
    best_gain = -np.inf
    best_threshold = np.nan
    parent_sse = total_sq - total_sum * total_sum / n
    for i in range(min_leaf, n - min_leaf + 1):
        if i == n or xs[i] == xs[i - 1]:
            continue
        left_sum = csum[i - 1]
        left_sse = csq[i - 1] - left_sum * left_sum / i
        right_n = n - i
        right_sum = total_sum - left_sum
        right_sse = (total_sq - csq[i - 1]) - right_sum * right_sum / right_n
        gain = parent_sse - left_sse - right_sse
        if gain > best_gain:
            best_gain = gain
            best_threshold = (xs[i - 1] + xs[i]) / 2.0
    return best_gain, best_threshold


def _grow(X, y, idx, depth, config, rng, nodes, importance):
    """Append the subtree over rows idx to nodes, returning its root index."""
    y_node = y[idx]
    if (
        depth >= config.max_depth
        or idx.size < 2 * config.min_samples_leaf
        or np.all(y_node == y_node[0])
    ):
        nodes.append(_leaf(np.mean(y_node)))
        return len(nodes) - 1
    n_features = X.shape[1]
    if config.features_per_split == "all":
        candidates = range(n_features)
    else:
        k = min(config.features_per_split, n_features)
        candidates = sorted(rng.choice(n_features, size=k, replace=False))
    best_gain = 0.0
    best_feature = -1
    best_threshold = np.nan
    for f in candidates:
        gain, threshold = _best_split(X[idx, f], y_node, config.min_samples_leaf)
        # strict > keeps the lowest feature index and lowest threshold on ties
        if gain > best_gain:
            best_gain = gain
            best_feature = f
            best_threshold = threshold
    if best_feature < 0:
        nodes.append(_leaf(np.mean(y_node)))
        return len(nodes) - 1
    importance[best_feature] += best_gain
    mask = X[idx, best_feature] <= best_threshold
    position = len(nodes)
    nodes.append(None)
    left = _grow(X, y, idx[mask], depth + 1, config, rng, nodes, importance)
    right = _grow(X, y, idx[~mask], depth + 1, config, rng, nodes, importance)
    nodes[position] = TreeNode(best_feature, float(best_threshold), left, right, 0.0)
    return position


def forest_fit(X, y, config: ForestConfig = ForestConfig()) -> ForestModel:
    """Grow config.n_trees CART trees on seeded bootstrap samples."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.size:
        raise ShapeMismatch(f"X must be (n, f) with y of length n, got {X.shape}, {y.shape}")
    if X.shape[1] < 1:
        raise ShapeMismatch("need at least one feature")
    n = y.size
    if n < 2 * config.min_samples_leaf:
        raise ValueError(
            f"need at least {2 * config.min_samples_leaf} rows, got {n}"
        )
    if np.all(y == y[0]):
        warnings.warn(
            "all targets equal; every tree degenerates to a single leaf",
            DegenerateTargets,
        )
    importance = np.zeros(X.shape[1])
    trees = []
    for t in range(config.n_trees):
        rng = rng_for(config.seed, t)
        if config.bootstrap:
            idx = np.sort(rng.integers(0, n, size=n))
        else:
            idx = np.arange(n)
        nodes: list = []
        _grow(X, y, idx, 0, config, rng, nodes, importance)
        trees.append(tuple(nodes))
    total = importance.sum()
    if total > 0:
        importance = importance / total
    return ForestModel(tuple(trees), importance, X.shape[1], config)


def _tree_predict(nodes: tuple[TreeNode, ...], x: np.ndarray) -> float:
    node = nodes[0]
    while not node.is_leaf:
        node = nodes[node.left] if x[node.feature] <= node.threshold else nodes[node.right]
    return node.value


def forest_predict(model: ForestModel, x) -> float:
    """Mean of the per-tree leaf values (exactly order-invariant)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise ShapeMismatch(
            f"expected a feature vector of length {model.n_features}, got shape {x.shape}"
        )
    return math.fsum(_tree_predict(tree, x) for tree in model.trees) / len(model.trees)


def forest_predict_batch(model: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeMismatch(
            f"expected (n, {model.n_features}) features, got shape {X.shape}"
        )
    return np.array([forest_predict(model, row) for row in X])


def importance_ratio(model: ForestModel) -> float:
    """Importance of feature 1 over feature 2 (requires exactly 2 features)."""
    if model.n_features != 2:
        raise ShapeMismatch(
            f"importance ratio needs exactly 2 features, got {model.n_features}"
        )
    first, second = model.feature_importances
    if second == 0.0:
        raise ZeroImportance("second feature has zero importance; ratio undefined")
    return float(first / second)


# -- serialization -------------------------------------------------------


def save_forest(model: ForestModel, path) -> None:
    doc = {
        "format": FOREST_FORMAT,
        "n_features": model.n_features,
        "config": {
            "n_trees": model.config.n_trees,
            "max_depth": model.config.max_depth,
            "min_samples_leaf": model.config.min_samples_leaf,
            "features_per_split": model.config.features_per_split,
            "bootstrap": model.config.bootstrap,
            "seed": model.config.seed,
        },
        "feature_importances": model.feature_importances.tolist(),
        "trees": [
            [[n.feature, n.threshold, n.left, n.right, n.value] for n in tree]
            for tree in model.trees
        ],
    }
    from pathlib import Path

    Path(path).write_text(json.dumps(doc))


def load_forest(path) -> ForestModel:
    from pathlib import Path

    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FOREST_FORMAT:
        raise ValueError(f"unrecognized forest checkpoint format: {doc.get('format')!r}")
    config = ForestConfig(**doc["config"])
    trees = tuple(
        tuple(TreeNode(int(f), t, int(l), int(r), v) for f, t, l, r, v in tree)
        for tree in doc["trees"]
    )
    return ForestModel(
        trees, np.asarray(doc["feature_importances"]), doc["n_features"], config
    )
