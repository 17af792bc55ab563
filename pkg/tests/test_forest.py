import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metaocc.forest import (ForestConfig, ForestGrid, RandomForest, best_split_on_feature, fit_forest, gini,
                            grow_tree, rf_grid_search, self_label)
from metaocc.metrics import score_predictions
from metaocc.tasks import EvalTask, Task, TaskSplit, make_test_split


def exhaustive_split(X, y, min_leaf=1):
    """Every (feature, midpoint) pair, scored by weighted Gini; first minimum wins."""
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f]))
        for a, b in zip(vals, vals[1:]):
            t = (a + b) / 2
            left, right = y[X[:, f] <= t], y[X[:, f] > t]
            if min(left.size, right.size) < min_leaf:
                continue

            def g(part):
                p = part.mean()
                return 2 * p * (1 - p)

            imp = (left.size * g(left) + right.size * g(right)) / y.size
            if best is None or imp < best[0] - 1e-15:
                best = (imp, f, t)
    return best


def test_gini_values():
    assert gini(0, 4) == 0 and gini(4, 4) == 0
    assert gini(2, 4) == pytest.approx(0.5)
    assert gini(1, 4) == pytest.approx(0.375)
    assert gini(0, 0) == 0


def test_four_point_root_split_matches_oracle():
    X = np.array([[0.0, 1.0], [1.0, 3.0], [2.0, 0.0], [3.0, 2.0]])
    y = np.array([1, 1, 0, 0])
    imp, f, t = exhaustive_split(X, y)
    tree = grow_tree(X, y, ForestConfig(max_features=2), np.random.default_rng(0))
    assert (tree.feature[0], tree.threshold[0]) == (f, t)
    assert (f, t) == (0, 1.5)
    assert imp == 0.0


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=30),
       st.integers(1, 3))
def test_feature_split_matches_brute_force(rows, min_leaf):
    x = np.array([float(a) for a, _ in rows])
    y = np.array([b for _, b in rows])
    got = best_split_on_feature(x, y, min_leaf)
    want = exhaustive_split(x[:, None], y, min_leaf)
    if want is None:
        assert got is None
    else:
        assert got[0] == pytest.approx(want[0], abs=1e-12)
        left, right = y[x <= got[1]], y[x > got[1]]
        assert min(left.size, right.size) >= min_leaf


def test_two_points_are_fit_exactly():
    X, y = np.array([[0.0], [1.0]]), np.array([0, 1])
    forest = fit_forest(ForestConfig(n_trees=5, bootstrap=False), X, y, seed=0)
    np.testing.assert_array_equal(forest.predict(X), y)


@given(st.integers(2, 60), st.integers(1, 5), st.integers(0, 10_000))
def test_single_unbootstrapped_tree_memorizes(n, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = rng.integers(0, 2, size=n)
    y[0], y[-1] = 0, 1
    forest = fit_forest(ForestConfig(n_trees=1, bootstrap=False), X, y, seed=seed)
    assert (forest.predict(X) == y).all()


def test_same_seed_same_structure(rng):
    X, y = rng.normal(size=(80, 4)), rng.integers(0, 2, 80)
    cfg = ForestConfig(n_trees=7, max_depth=5)
    assert fit_forest(cfg, X, y, 3).to_text() == fit_forest(cfg, X, y, 3).to_text()
    assert fit_forest(cfg, X, y, 3).to_text() != fit_forest(cfg, X, y, 4).to_text()


def test_parallel_fit_matches_serial(rng):
    X, y = rng.normal(size=(60, 3)), rng.integers(0, 2, 60)
    cfg = ForestConfig(n_trees=6)
    assert fit_forest(cfg, X, y, 1, n_jobs=3).to_text() == fit_forest(cfg, X, y, 1).to_text()


def test_separable_blobs():
    rng = np.random.default_rng(0)

    def blobs(n):
        X = np.vstack([rng.normal([-2, -2], 0.5, size=(n, 2)), rng.normal([2, 2], 0.5, size=(n, 2))])
        return X, np.r_[np.zeros(n, int), np.ones(n, int)]

    X, y = blobs(100)
    Xt, yt = blobs(200)
    forest = fit_forest(ForestConfig(n_trees=100), X, y, seed=0)
    assert score_predictions(forest.predict(Xt), yt).f1 > 0.95


def test_probability_is_mean_of_trees(rng):
    X, y = rng.normal(size=(50, 3)), rng.integers(0, 2, 50)
    forest = fit_forest(ForestConfig(n_trees=9, max_depth=3), X, y, 2)
    Xq = rng.normal(size=(20, 3))
    votes = np.vstack([t.predict_proba(Xq) for t in forest.trees])
    np.testing.assert_array_equal(forest.predict_proba(Xq), votes.mean(axis=0))
    np.testing.assert_array_equal(forest.predict(Xq), (votes.mean(axis=0) >= 0.5).astype(int))


def test_constraints_respected(rng):
    X, y = rng.normal(size=(300, 4)), rng.integers(0, 2, 300)
    forest = fit_forest(ForestConfig(n_trees=5, max_depth=4, min_leaf=7, min_split=20), X, y, 0)
    for t in forest.trees:
        leaves = t.feature == -1
        assert t.max_depth <= 4
        assert t.n_samples[leaves].min() >= 7
        assert np.all(t.n_samples[~leaves] >= 20)


def test_truncation_equals_smaller_fit(rng):
    X, y = rng.normal(size=(70, 3)), rng.integers(0, 2, 70)
    big = fit_forest(ForestConfig(n_trees=12, max_depth=4), X, y, 5)
    small = fit_forest(ForestConfig(n_trees=4, max_depth=4), X, y, 5)
    assert big.truncated(4).to_text() == small.to_text()
    with pytest.raises(ValueError):
        small.truncated(5)


def test_text_roundtrip(rng):
    X, y = rng.normal(size=(40, 3)), rng.integers(0, 2, 40)
    forest = fit_forest(ForestConfig(n_trees=3, max_depth=None, bootstrap=False), X, y, 9)
    back = RandomForest.from_text(forest.to_text())
    assert back.config == forest.config and back.to_text() == forest.to_text()
    np.testing.assert_array_equal(back.predict_proba(X), forest.predict_proba(X))


def test_fit_rejects_bad_labels():
    X = np.zeros((3, 1))
    with pytest.raises(ValueError):
        fit_forest(ForestConfig(), X, [1, 1, 1])
    with pytest.raises(ValueError):
        fit_forest(ForestConfig(), X, [0, 1, 2])
    with pytest.raises(ValueError):
        fit_forest(ForestConfig(), X, [0, 1])


def imbalanced_task(seed, n_pos=60, n_neg=3000):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(1.5, 0.6, size=(n_pos, 3)), rng.normal(0.0, 1.0, size=(n_neg, 3))])
    y = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
    return X, y, make_test_split(Task("t", X, y), 0.1, seed)


def test_self_label_grows_positive_set():
    X, y, split = imbalanced_task(0)
    _, hist = self_label(ForestConfig(n_trees=20), X, y, split, iterations=5, seed=0)
    sizes = [h.n_positive_train for h in hist]
    assert sizes == sorted(sizes)
    assert 1 <= len(hist) <= 6
    assert hist[0].n_positive_train == split.support.size


def test_self_label_stops_without_new_positives():
    X, y, split = imbalanced_task(1)
    far = np.full((split.pool.size, X.shape[1]), -50.0)
    X = X.copy()
    X[split.pool] = far
    _, hist = self_label(ForestConfig(n_trees=10), X, y, split, iterations=10)
    assert len(hist) == 1


def test_self_label_empty_pool_returns_initial_fit():
    X, y, split = imbalanced_task(2)
    empty = TaskSplit(split.support, split.baseline_negatives, np.array([], dtype=np.int64),
                      np.sort(np.r_[split.pool, split.final_test]))
    forest, hist = self_label(ForestConfig(n_trees=5), X, y, empty, iterations=10, seed=3)
    assert len(hist) == 1
    assert forest.to_text() == fit_forest(ForestConfig(n_trees=5), X[empty.train], y[empty.train], 3).to_text()


def test_self_label_never_touches_final_test():
    X, y, split = imbalanced_task(3)
    bad = TaskSplit(split.support, split.baseline_negatives, np.r_[split.pool, split.final_test[:1]],
                    split.final_test)
    with pytest.raises(ValueError):
        self_label(ForestConfig(n_trees=3), X, y, bad)
    X_test_poisoned = X.copy()
    X_test_poisoned[split.final_test] = np.nan
    self_label(ForestConfig(n_trees=5), np.nan_to_num(X_test_poisoned, nan=0.0), y, split, iterations=2)


def test_self_label_selection_by_criterion():
    X, y, split = imbalanced_task(4)
    forest, hist = self_label(ForestConfig(n_trees=10), X, y, split, iterations=3, selection="f1")
    best = max(h.train_score.f1 for h in hist)
    assert any(h.forest is forest and h.train_score.f1 == best for h in hist)
    with pytest.raises(ValueError):
        self_label(ForestConfig(n_trees=3), X, y, split, selection="accuracy")


def test_default_grid_size():
    grid = ForestGrid()
    assert len(grid) == 216 == len(grid.combinations())
    assert len(set(grid.combinations())) == 216


def eval_tasks(n=2):
    out = []
    for s in range(n):
        X, y, split = imbalanced_task(10 + s, 30, 900)
        out.append(EvalTask("t%d" % s, X, y, split))
    return out


def test_degenerate_grid_selects_its_only_config():
    grid = ForestGrid(n_trees=(5,), max_depth=(3,), min_split=(2,), min_leaf=(1,), bootstrap=(True,))
    sel = rf_grid_search(grid, eval_tasks(), seed=0)
    for cfg, it in sel.chosen().values():
        assert cfg == ForestConfig(5, 3, 2, 1, True) and it == 0


def test_grid_search_truncation_and_determinism():
    tasks = eval_tasks()
    grid = ForestGrid(n_trees=(3, 6), max_depth=(2, None), min_split=(2,), min_leaf=(1,), bootstrap=(True, False))
    sel = rf_grid_search(grid, tasks, seed=1)
    again = rf_grid_search(grid, tasks, seed=1)
    assert [(c, i, k.values()) for c, i, k in sel.rows] == [(c, i, k.values()) for c, i, k in again.rows]
    # each row equals a direct fit of that configuration
    for cfg, _, card in sel.rows[:4]:
        direct = []
        for t in tasks:
            f = fit_forest(cfg, t.X[t.split.train], t.y[t.split.train], 1)
            direct.append(score_predictions(f.predict(t.X[t.split.final_test]), t.y[t.split.final_test]))
        assert card.f1 == pytest.approx(np.mean([d.f1 for d in direct]), abs=1e-12)


def test_grid_with_self_labeling_rows():
    grid = ForestGrid(n_trees=(4,), max_depth=(3,), min_split=(2,), min_leaf=(1,), bootstrap=(False,))
    sel = rf_grid_search(grid, eval_tasks(1), seed=0, self_label_iterations=(0, 2))
    assert [it for _, it, _ in sel.rows] == [0, 2]


def test_ties_go_to_lower_index():
    grid = ForestGrid(n_trees=(4, 4), max_depth=(3,), min_split=(2,), min_leaf=(1,), bootstrap=(True,))
    sel = rf_grid_search(grid, eval_tasks(1), seed=0)
    assert sel.rows[0][2].values() == sel.rows[1][2].values()
    assert sel.best("f1")[0] is sel.rows[0][0]
