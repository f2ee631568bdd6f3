"""Random-forest checks against an exhaustive brute-force CART oracle.

The oracle enumerates every (feature, midpoint-threshold) candidate at
every node and recomputes SSE directly from the partitions, so it shares
no code with the prefix-sum scan inside the package. Exact gain ties
(identical y-partitions reachable through different features) come out
ulp-scrambled between the two arithmetics, so ties are detected with a
tolerance and the documented lexicographic tie-break is asserted over
the tied set; away from ties this is plain structural equality.
"""

import numpy as np
import pytest

from sohforge.errors import DegenerateTargets, ShapeMismatch, ZeroImportance
from sohforge.forest import (
    ForestConfig,
    ForestModel,
    forest_fit,
    forest_predict,
    forest_predict_batch,
    importance_ratio,
    load_forest,
    save_forest,
)
from sohforge.seeding import rng_for

TIE_TOL = 1e-9


# -- brute-force CART oracle -------------------------------------------------


def brute_sse(values):
    return float(np.sum((values - np.mean(values)) ** 2))


def brute_candidates(X, y, idx, min_leaf):
    """Every valid (gain, feature, threshold) at this node, direct arithmetic."""
    parent = brute_sse(y[idx])
    out = []
    for f in range(X.shape[1]):
        vals = np.unique(X[idx, f])
        for a, b in zip(vals[:-1], vals[1:]):
            threshold = (a + b) / 2.0
            mask = X[idx, f] <= threshold
            left, right = idx[mask], idx[~mask]
            if left.size < min_leaf or right.size < min_leaf:
                continue
            gain = parent - brute_sse(y[left]) - brute_sse(y[right])
            out.append((gain, f, threshold))
    return out


def oracle_optimal_splits(X, y, idx, min_leaf):
    """(feature, threshold) pairs tied for the best positive gain, or []."""
    cands = brute_candidates(X, y, idx, min_leaf)
    if not cands:
        return [], 0.0
    best = max(g for g, _, _ in cands)
    if best <= TIE_TOL:
        return [], best
    cutoff = best - TIE_TOL * max(1.0, abs(best))
    return [(f, thr) for g, f, thr in cands if g >= cutoff], best


def verify_tree_against_oracle(nodes, X, y, min_leaf, max_depth, importance):
    """Walk the fitted tree asserting every CART rule with oracle arithmetic."""

    def visit(node_idx, idx, depth):
        node = nodes[node_idx]
        y_node = y[idx]
        forced_leaf = (
            depth >= max_depth
            or idx.size < 2 * min_leaf
            or np.all(y_node == y_node[0])
        )
        if node.is_leaf:
            if not forced_leaf:
                optimal, _ = oracle_optimal_splits(X, y, idx, min_leaf)
                assert not optimal, "leaf although a positive-gain split exists"
            assert node.value == np.mean(y_node)
            return
        assert not forced_leaf, "split although a stopping rule applies"
        optimal, best_gain = oracle_optimal_splits(X, y, idx, min_leaf)
        assert optimal, "split although no positive-gain candidate exists"
        # a float-level tie may be resolved toward any tied member; away
        # from ties the set is a singleton and this is exact equality
        assert (node.feature, node.threshold) in optimal
        importance[node.feature] += best_gain
        mask = X[idx, node.feature] <= node.threshold
        assert mask.sum() >= min_leaf and (~mask).sum() >= min_leaf
        visit(node.left, idx[mask], depth + 1)
        visit(node.right, idx[~mask], depth + 1)

    visit(0, np.arange(len(y)), 0)


def random_dataset(seed):
    rng = rng_for(500, seed)
    n = int(rng.integers(10, 51))
    X = rng.normal(0.0, 1.0, (n, 3))
    y = np.sin(3.0 * X[:, 0]) + X[:, 1] * X[:, 2] + 0.1 * rng.normal(0.0, 1.0, n)
    return X, y


def test_single_tree_matches_exhaustive_cart():
    for seed in range(50):
        X, y = random_dataset(seed)
        min_leaf = [1, 2, 5][seed % 3]
        max_depth = [2, 4, 50][seed % 3]
        config = ForestConfig(
            n_trees=1,
            max_depth=max_depth,
            min_samples_leaf=min_leaf,
            features_per_split="all",
            bootstrap=False,
            seed=seed,
        )
        model = forest_fit(X, y, config)
        oracle_importance = np.zeros(3)
        verify_tree_against_oracle(
            model.trees[0], X, y, min_leaf, max_depth, oracle_importance
        )
        total = oracle_importance.sum()
        if total > 0:
            np.testing.assert_allclose(
                model.feature_importances, oracle_importance / total, rtol=1e-6, atol=1e-12
            )


def test_tie_break_prefers_lower_feature_index():
    # an exactly duplicated column produces bitwise-equal gains; the
    # split must land on the lower feature index
    rng = rng_for(61)
    x0 = rng.normal(0.0, 1.0, 30)
    X = np.column_stack([x0, x0])
    y = np.where(x0 > 0, 1.0, 0.0)
    config = ForestConfig(
        n_trees=1, max_depth=2, min_samples_leaf=1, bootstrap=False, seed=0
    )
    model = forest_fit(X, y, config)
    assert model.trees[0][0].feature == 0


def test_tie_break_prefers_lower_threshold():
    # symmetric targets make the two candidate gains exactly equal
    X = np.array([[1.0], [2.0], [3.0]])
    y = np.array([0.0, 1.0, 0.0])
    config = ForestConfig(
        n_trees=1, max_depth=1, min_samples_leaf=1, bootstrap=False, seed=0
    )
    model = forest_fit(X, y, config)
    root = model.trees[0][0]
    assert not root.is_leaf
    assert root.threshold == 1.5


def test_fully_grown_tree_memorizes_training_points():
    rng = rng_for(7)
    X = rng.normal(0.0, 1.0, (30, 2))
    y = rng.normal(0.0, 1.0, 30)
    config = ForestConfig(
        n_trees=1, max_depth=50, min_samples_leaf=1, bootstrap=False, seed=0
    )
    model = forest_fit(X, y, config)
    for row, target in zip(X, y):
        assert forest_predict(model, row) == target


# -- basic behaviour -----------------------------------------------------------


def test_constant_targets_warn_and_predict_exactly():
    rng = rng_for(3)
    X = rng.normal(0.0, 1.0, (40, 2))
    y = np.full(40, 0.7)
    with pytest.warns(DegenerateTargets):
        model = forest_fit(X, y, ForestConfig(n_trees=5, seed=1))
    assert forest_predict(model, np.zeros(2)) == 0.7
    assert np.all(model.feature_importances == 0.0)


def test_step_function_recovery():
    rng = rng_for(11)
    x = rng.uniform(0.0, 1.0, 200)
    y = (x > 0.5).astype(float)
    model = forest_fit(x[:, None], y, ForestConfig(n_trees=30, seed=2))
    predictions = forest_predict_batch(model, x[:, None])
    assert np.mean(np.abs(predictions - y)) < 0.01


def test_predictions_bounded_by_training_targets():
    rng = rng_for(19)
    X = rng.normal(0.0, 1.0, (120, 3))
    y = rng.uniform(0.6, 1.0, 120)
    model = forest_fit(X, y, ForestConfig(seed=3))
    probes = rng.normal(0.0, 3.0, (50, 3))
    predictions = forest_predict_batch(model, probes)
    assert np.all(predictions >= y.min())
    assert np.all(predictions <= y.max())


def test_permuting_trees_leaves_prediction_unchanged():
    rng = rng_for(23)
    X = rng.normal(0.0, 1.0, (60, 2))
    y = X[:, 0] + 0.2 * rng.normal(0.0, 1.0, 60)
    model = forest_fit(X, y, ForestConfig(n_trees=16, seed=4))
    permuted = ForestModel(
        model.trees[::-1], model.feature_importances, model.n_features, model.config
    )
    probe = np.array([0.3, -0.8])
    assert forest_predict(model, probe) == forest_predict(permuted, probe)


def test_fit_is_deterministic_in_seed():
    rng = rng_for(29)
    X = rng.normal(0.0, 1.0, (80, 2))
    y = X[:, 0] ** 2 + rng.normal(0.0, 0.1, 80)
    a = forest_fit(X, y, ForestConfig(n_trees=10, seed=5))
    b = forest_fit(X, y, ForestConfig(n_trees=10, seed=5))
    assert a.trees == b.trees
    np.testing.assert_array_equal(a.feature_importances, b.feature_importances)


def test_positive_affine_feature_rescale_keeps_predictions():
    rng = rng_for(31)
    X = rng.normal(0.0, 1.0, (70, 2))
    y = np.sin(X[:, 0]) + 0.5 * X[:, 1]
    scaled = X.copy()
    scaled[:, 0] = 3.0 * X[:, 0] + 5.0
    config = ForestConfig(n_trees=8, seed=6)
    model = forest_fit(X, y, config)
    rescaled_model = forest_fit(scaled, y, config)
    for row, scaled_row in zip(X, scaled):
        assert forest_predict(model, row) == forest_predict(rescaled_model, scaled_row)


def test_random_feature_subsets_stay_deterministic():
    rng = rng_for(37)
    X = rng.normal(0.0, 1.0, (60, 3))
    y = X[:, 0] - X[:, 2] + 0.1 * rng.normal(0.0, 1.0, 60)
    config = ForestConfig(n_trees=6, features_per_split=2, seed=7)
    a = forest_fit(X, y, config)
    b = forest_fit(X, y, config)
    assert a.trees == b.trees


# -- importances ----------------------------------------------------------------


def test_informative_feature_dominates_importance():
    rng = rng_for(41)
    X = np.column_stack([rng.uniform(0.0, 1.0, 500), rng.normal(0.0, 1.0, 500)])
    y = np.where(X[:, 0] > 0.5, 1.0, 0.0) + 0.05 * rng.normal(0.0, 1.0, 500)
    model = forest_fit(X, y, ForestConfig(seed=8))
    assert importance_ratio(model) > 5.0
    assert model.feature_importances.sum() == pytest.approx(1.0, abs=1e-12)


def test_importance_ratio_symmetry_and_zero_guard():
    leaf = (ForestModel.__new__(ForestModel),)  # placeholder, not used below
    equal = ForestModel((), np.array([0.5, 0.5]), 2, ForestConfig())
    assert importance_ratio(equal) == 1.0
    lopsided = ForestModel((), np.array([1.0, 0.0]), 2, ForestConfig())
    with pytest.raises(ZeroImportance):
        importance_ratio(lopsided)
    three = ForestModel((), np.zeros(3), 3, ForestConfig())
    with pytest.raises(ShapeMismatch):
        importance_ratio(three)


def test_reported_ratio_formatting():
    # per-fold ratios are reported with two decimals, e.g. 1.41
    model = ForestModel((), np.array([0.585, 0.415]), 2, ForestConfig())
    assert f"{importance_ratio(model):.2f}" == "1.41"


# -- validation and serialization -------------------------------------------------


def test_fit_validation():
    with pytest.raises(ShapeMismatch):
        forest_fit(np.zeros((4, 2)), np.zeros(5))
    with pytest.raises(ShapeMismatch):
        forest_fit(np.zeros(4), np.zeros(4))
    with pytest.raises(ValueError):
        forest_fit(np.zeros((4, 1)), np.zeros(4), ForestConfig(min_samples_leaf=3))


def test_config_validation():
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)
    with pytest.raises(ValueError):
        ForestConfig(min_samples_leaf=0)
    with pytest.raises(ValueError):
        ForestConfig(features_per_split=0)
    with pytest.raises(ValueError):
        ForestConfig(features_per_split="half")


def test_predict_validation():
    rng = rng_for(43)
    X = rng.normal(0.0, 1.0, (20, 2))
    y = rng.normal(0.0, 1.0, 20)
    model = forest_fit(X, y, ForestConfig(n_trees=2, seed=9))
    with pytest.raises(ShapeMismatch):
        forest_predict(model, np.zeros(3))
    with pytest.raises(ShapeMismatch):
        forest_predict_batch(model, np.zeros((4, 3)))


def test_checkpoint_round_trip(tmp_path):
    rng = rng_for(47)
    X = rng.normal(0.0, 1.0, (50, 2))
    y = X[:, 0] + 0.3 * rng.normal(0.0, 1.0, 50)
    model = forest_fit(X, y, ForestConfig(n_trees=7, seed=10))
    path = tmp_path / "forest.json"
    save_forest(model, path)
    loaded = load_forest(path)
    assert loaded.trees == model.trees
    assert loaded.config == model.config
    np.testing.assert_array_equal(loaded.feature_importances, model.feature_importances)
    probe = np.array([0.1, -0.4])
    assert forest_predict(loaded, probe) == forest_predict(model, probe)


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "not-a-forest"}')
    with pytest.raises(ValueError):
        load_forest(path)
