import numpy as np
import pytest

from retention_risk.learners import trees


def gini_children(x, y, t):
    left, right = y[x <= t], y[x > t]
    out = 0.0
    for part in (left, right):
        if len(part):
            p = part.mean()
            out += len(part) * 2 * p * (1 - p)
    return out / len(y)


def test_stump_picks_best_gini_split(rng):
    for _ in range(20):
        X = rng.integers(0, 6, size=(40, 3)).astype(float)
        y = (rng.random(40) < 0.2 + 0.1 * X[:, 1]).astype(float)
        tree = trees.fit_tree(X, y, ["a", "b", "c"], max_depth=1)
        if tree.n_nodes == 1:
            continue
        f, t = tree.feature[0], tree.threshold[0]
        best = min(gini_children(X[:, j], y, v)
                   for j in range(3) for v in np.unique(X[:, j])[:-1])
        assert gini_children(X[:, f], y, t) == pytest.approx(best, abs=1e-12)


def test_threshold_is_midpoint():
    X = np.array([[1.0], [2.0], [4.0], [5.0]])
    y = np.array([0, 0, 1, 1.0])
    tree = trees.fit_tree(X, y, ["x"], max_depth=1)
    assert tree.threshold[0] == 3.0
    assert tree.predict(np.array([[3.0], [3.5]])).tolist() == [0.0, 1.0]


def test_pure_node_is_leaf():
    X = np.arange(10, dtype=float)[:, None]
    tree = trees.fit_tree(X, np.ones(10), ["x"])
    assert tree.n_nodes == 1 and tree.value[0] == 1.0


def test_min_samples_leaf_respected(rng):
    X = rng.random((200, 4))
    y = (rng.random(200) < X[:, 0]).astype(float)
    tree = trees.fit_tree(X, y, list("abcd"), min_samples_leaf=15)
    leaves = tree.feature < 0
    assert tree.weight[leaves].min() >= 15


def test_duplicate_columns_tie_break_by_name():
    x = np.array([0, 0, 1, 1, 0, 1.0])
    X = np.column_stack([x, x])
    y = x.copy()
    # identical gain: the lexicographically first feature name wins, whatever its position
    assert trees.fit_tree(X, y, ["zeta", "alpha"], max_depth=1).feature[0] == 1
    assert trees.fit_tree(X, y, ["alpha", "zeta"], max_depth=1).feature[0] == 0


def test_forest_deterministic_and_jobs_invariant(rng):
    X = rng.random((300, 6))
    y = (rng.random(300) < X[:, 0]).astype(float)
    names = list("abcdef")
    a = trees.fit_forest(X, y, names, n_trees=8, seed=4)
    b = trees.fit_forest(X, y, names, n_trees=8, seed=4, jobs=2)
    c = trees.fit_forest(X, y, names, n_trees=8, seed=5)
    pa, pb, pc = (trees.predict_forest(t, X) for t in (a, b, c))
    assert np.array_equal(pa, pb)
    assert not np.array_equal(pa, pc)


def test_forest_degenerates_to_tree(rng):
    X = rng.integers(0, 4, size=(120, 5)).astype(float)
    y = (rng.random(120) < 0.3).astype(float)
    names = list("vwxyz")
    forest = trees.fit_forest(X, y, names, n_trees=1, bootstrap=False, max_features=None, seed=9)
    single = trees.fit_tree(X, y, names)
    assert np.array_equal(trees.predict_forest(forest, X), single.predict(X))


def test_boosting_trace_decreases(rng):
    X = rng.random((400, 5))
    y = (rng.random(400) < 1 / (1 + np.exp(-4 * (X[:, 0] - 0.5)))).astype(float)
    base, fitted, trace = trees.fit_boosting(X, y, list("abcde"), n_rounds=30, learning_rate=0.3)
    assert len(trace) == 31
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
    p = trees.predict_boosting(base, fitted, 0.3, X)
    assert trees.log_loss(y, p) == pytest.approx(trace[-1])


def test_boosting_zero_learning_rate_is_prior(rng):
    X = rng.random((50, 2))
    y = (rng.random(50) < 0.3).astype(float)
    base, fitted, trace = trees.fit_boosting(X, y, ["a", "b"], n_rounds=3, learning_rate=0.0)
    assert np.allclose(trees.predict_boosting(base, fitted, 0.0, X), y.mean())


def test_tree_serialisation_roundtrip(rng):
    X = rng.random((100, 3))
    y = (X[:, 0] > 0.4).astype(float)
    tree = trees.fit_tree(X, y, list("abc"), max_depth=3)
    again = trees.Tree.from_dict(tree.to_dict())
    assert np.array_equal(again.predict(X), tree.predict(X))


def test_contributions_sum_to_prediction(rng):
    X = rng.random((80, 3))
    y = (X[:, 1] > 0.5).astype(float)
    tree = trees.fit_tree(X, y, list("abc"), max_depth=3)
    out = np.zeros((80, 3))
    tree.add_contributions(X, out)
    assert np.allclose(out.sum(axis=1) + tree.value[0], tree.predict(X))


def test_importances_normalised(rng):
    X = rng.random((200, 4))
    y = (X[:, 2] > 0.5).astype(float)
    forest = trees.fit_forest(X, y, list("abcd"), n_trees=5, seed=1)
    imp = trees.impurity_importances(forest, 4, average=True)
    assert imp.sum() == pytest.approx(1.0)
    assert imp.argmax() == 2


@pytest.mark.parametrize("value, p, want", [("sqrt", 99, 9), ("log2", 8, 3), (0.5, 10, 5), (None, 7, 7), (40, 7, 7)])
def test_resolve_max_features(value, p, want):
    assert trees.resolve_max_features(value, p) == want


def test_rejects_non_finite():
    with pytest.raises(ValueError, match="finite"):
        trees.fit_tree(np.array([[np.nan]]), np.array([1.0]), ["x"])
