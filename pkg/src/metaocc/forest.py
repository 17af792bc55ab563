"""Gini random forest grown from scratch, and the self-labeling loop around it."""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import METRIC_NAMES, Scorecard, aggregate, score_predictions
from .tasks import EvalTask, TaskSplit

LEAF = -1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_split: int = 2
    min_leaf: int = 1
    bootstrap: bool = True
    max_features: int | None = None

    def features_per_split(self, n_features: int) -> int:
        if self.max_features is not None:
            return max(1, min(self.max_features, n_features))
        return max(1, math.ceil(math.sqrt(n_features)))


def gini(pos: np.ndarray | float, n: np.ndarray | float):
    """Binary Gini impurity 2p(1-p) of a node with ``pos`` positives out of ``n``."""
    p = np.divide(pos, n, out=np.zeros_like(np.asarray(pos, dtype=float)), where=np.asarray(n) > 0)
    return 2.0 * p * (1.0 - p)


def best_split_on_feature(x: np.ndarray, y: np.ndarray, min_leaf: int = 1):
    """Lowest weighted Gini over midpoint thresholds of one feature.

    Returns ``(weighted_impurity, threshold)`` or ``None`` when no threshold
    leaves ``min_leaf`` rows on both sides.  Rows with ``x <= threshold`` go left.
    """
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = xs.size
    left_n = np.arange(1, n)
    left_pos = np.cumsum(ys)[:-1]
    total_pos = left_pos[-1] + ys[-1] if n > 1 else ys.sum()
    valid = (xs[1:] > xs[:-1]) & (left_n >= min_leaf) & (n - left_n >= min_leaf)
    if not valid.any():
        return None
    right_n = n - left_n
    imp = (left_n * gini(left_pos, left_n) + right_n * gini(total_pos - left_pos, right_n)) / n
    imp = np.where(valid, imp, np.inf)
    i = int(np.argmin(imp))
    return float(imp[i]), float((xs[i] + xs[i + 1]) / 2.0)


@dataclass
class DecisionTree:
    """Array-backed binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] != LEAF)
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] != LEAF]
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(np.asarray(X, dtype=np.float64))]


def grow_tree(X: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator) -> DecisionTree:
    n_features = X.shape[1]
    mtry = cfg.features_per_split(n_features)
    feat, thr, left, right, value, depth, count = [], [], [], [], [], [], []

    def new_node(rows, d):
        feat.append(LEAF)
        thr.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(y[rows].mean()))
        depth.append(d)
        count.append(rows.size)
        return len(feat) - 1

    stack = [(new_node(np.arange(y.size), 0), np.arange(y.size))]
    while stack:
        node, rows = stack.pop()
        d = depth[node]
        pos = y[rows].sum()
        if (rows.size < cfg.min_split or pos == 0 or pos == rows.size
                or (cfg.max_depth is not None and d >= cfg.max_depth)
                or rows.size < 2 * cfg.min_leaf):
            continue
        best = None
        tried = 0
        xr, yr = X[rows], y[rows]
        for f in rng.permutation(n_features):
            col = xr[:, f]
            if col.min() == col.max():
                continue
            tried += 1
            cand = best_split_on_feature(col, yr, cfg.min_leaf)
            if cand is not None and (best is None or cand[0] < best[0]):
                best = (cand[0], cand[1], int(f))
            if tried >= mtry and best is not None:
                break
        if best is None:
            continue
        _, t, f = best
        mask = X[rows, f] <= t
        feat[node], thr[node] = f, t
        li = new_node(rows[mask], d + 1)
        ri = new_node(rows[~mask], d + 1)
        left[node], right[node] = li, ri
        # right pushed first so the left subtree is expanded first
        stack.append((ri, rows[~mask]))
        stack.append((li, rows[mask]))
    return DecisionTree(np.array(feat), np.array(thr), np.array(left), np.array(right),
                        np.array(value), np.array(depth), np.array(count))


@dataclass
class RandomForest:
    config: ForestConfig
    trees: list[DecisionTree]
    seed: int = 0

    def predict_proba(self, X) -> np.ndarray:
        """Mean over trees of the class-1 frequency in the reached leaf."""
        X = np.asarray(X, dtype=np.float64)
        return np.mean([t.predict_proba(X) for t in self.trees], axis=0)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def truncated(self, n_trees: int) -> RandomForest:
        """The forest made of the first ``n_trees`` trees (identical to fitting
        ``n_trees`` from the same seed)."""
        if n_trees > len(self.trees):
            raise ValueError(f"forest has only {len(self.trees)} trees")
        cfg = ForestConfig(**{**asdict(self.config), "n_trees": n_trees})
        return RandomForest(cfg, self.trees[:n_trees], self.seed)

    def to_text(self) -> str:
        lines = [f"forest {json_config(self.config)} seed={self.seed} trees={len(self.trees)}"]
        for i, t in enumerate(self.trees):
            lines.append(f"tree {i} nodes={t.n_nodes}")
            for j in range(t.n_nodes):
                lines.append(f"{j} {t.feature[j]} {float(t.threshold[j])!r} {t.left[j]} {t.right[j]} "
                             f"{float(t.value[j])!r} {t.depth[j]} {t.n_samples[j]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> RandomForest:
        lines = text.splitlines()
        head = lines[0].split(" ", 1)[1]
        cfg_json, rest = head.rsplit(" seed=", 1)
        seed = int(rest.split()[0])
        cfg = ForestConfig(**json.loads(cfg_json))
        trees, i = [], 1
        while i < len(lines):
            n = int(lines[i].split("nodes=")[1])
            rows = [ln.split() for ln in lines[i + 1:i + 1 + n]]
            cols = list(zip(*rows))
            trees.append(DecisionTree(
                feature=np.array(cols[1], dtype=np.int64), threshold=np.array(cols[2], dtype=float),
                left=np.array(cols[3], dtype=np.int64), right=np.array(cols[4], dtype=np.int64),
                value=np.array(cols[5], dtype=float), depth=np.array(cols[6], dtype=np.int64),
                n_samples=np.array(cols[7], dtype=np.int64)))
            i += 1 + n
        return cls(cfg, trees, seed)


def json_config(cfg: ForestConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))


def fit_forest(cfg: ForestConfig, X, y, seed: int = 0, n_jobs: int = 1) -> RandomForest:
    """Grow ``cfg.n_trees`` trees; tree ``i`` depends only on (seed, i)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.shape[0] != y.size:
        raise ValueError(f"{X.shape[0]} rows, {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    if y.min() == y.max():
        raise ValueError("need examples of both classes to fit a forest")
    children = np.random.SeedSequence(seed).spawn(cfg.n_trees)

    def one(ss):
        rng = np.random.default_rng(ss)
        if cfg.bootstrap:
            idx = rng.integers(0, y.size, size=y.size)
            return grow_tree(X[idx], y[idx], cfg, rng)
        return grow_tree(X, y, cfg, rng)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            trees = list(ex.map(one, children))
    else:
        trees = [one(ss) for ss in children]
    return RandomForest(cfg, trees, seed)


@dataclass
class SelfLabelStep:
    iteration: int
    n_positive_train: int
    n_added: int
    pool_remaining: int
    train_score: Scorecard
    forest: RandomForest = field(repr=False)


def self_label(cfg: ForestConfig, X, y, split: TaskSplit, iterations: int = 10,
               selection: str = "last", seed: int = 0) -> tuple[RandomForest, list[SelfLabelStep]]:
    """Fit, move predicted positives of the pool into the positive training set, refit.

    Stops after ``iterations`` refits or when the pool yields no new positive.
    ``selection`` is ``"last"`` or a metric name scored on the original
    training rows (ties go to the later iteration).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if np.intersect1d(split.pool, split.final_test).size:
        raise ValueError("self-labeling pool overlaps the final test rows")
    train = split.train
    pos_rows = split.support.copy()
    neg_rows = split.baseline_negatives
    pool = split.pool.copy()
    history: list[SelfLabelStep] = []
    n_added = 0
    for it in range(iterations + 1):
        rows = np.concatenate([pos_rows, neg_rows])
        labels = np.concatenate([np.ones(pos_rows.size, np.int64), np.zeros(neg_rows.size, np.int64)])
        forest = fit_forest(cfg, X[rows], labels, seed)
        card = score_predictions(forest.predict(X[train]), y[train])
        history.append(SelfLabelStep(it, pos_rows.size, n_added, pool.size, card, forest))
        if it == iterations or pool.size == 0:
            break
        hits = forest.predict(X[pool]).astype(bool)
        if not hits.any():
            break
        n_added = int(hits.sum())
        pos_rows = np.concatenate([pos_rows, pool[hits]])
        pool = pool[~hits]
    if selection == "last":
        chosen = history[-1]
    else:
        if selection not in METRIC_NAMES:
            raise ValueError(f"unknown selection {selection!r}")
        best = max(h.train_score[selection] for h in history)
        chosen = [h for h in history if h.train_score[selection] == best][-1]
    return chosen.forest, history


@dataclass(frozen=True)
class ForestGrid:
    n_trees: tuple[int, ...] = (100, 200, 300, 500)
    max_depth: tuple[int | None, ...] = (10, 30, 50)
    min_split: tuple[int, ...] = (2, 5, 10)
    min_leaf: tuple[int, ...] = (1, 2, 4)
    bootstrap: tuple[bool, ...] = (True, False)

    def combinations(self) -> list[ForestConfig]:
        return [ForestConfig(n, d, s, leaf, b) for d, s, leaf, b, n in itertools.product(
            self.max_depth, self.min_split, self.min_leaf, self.bootstrap, self.n_trees)]

    def __len__(self) -> int:
        return (len(self.n_trees) * len(self.max_depth) * len(self.min_split)
                * len(self.min_leaf) * len(self.bootstrap))


@dataclass
class ForestSelection:
    rows: list[tuple[ForestConfig, int, Scorecard]]

    def best(self, criterion: str = "f1") -> tuple[ForestConfig, int]:
        vals = [card[criterion] for _, _, card in self.rows]
        i = int(np.argmax(vals))  # first maximum -> smaller index wins ties
        return self.rows[i][0], self.rows[i][1]

    def chosen(self) -> dict[str, tuple[ForestConfig, int]]:
        return {c: self.best(c) for c in METRIC_NAMES}


def rf_grid_search(grid: ForestGrid, tasks: list[EvalTask], seed: int = 0,
                   self_label_iterations: tuple[int, ...] = (0,)) -> ForestSelection:
    """Mean final-test scores over ``tasks`` for every (config, iteration count).

    Without self-labeling, forests sharing all but ``n_trees`` are grown once
    at the largest size and truncated.  With it, one run per config at the
    largest iteration count yields every smaller count from its history.
    """
    combos = grid.combinations()
    its = sorted(set(self_label_iterations))
    scores: dict[tuple[int, int], list[Scorecard]] = {}
    for t in tasks:
        test = t.split.final_test
        models: dict[tuple[int, int], RandomForest] = {}
        if its == [0]:
            grown: dict[tuple, RandomForest] = {}
            n_max = max(grid.n_trees)
            for ci, c in enumerate(combos):
                key = (c.max_depth, c.min_split, c.min_leaf, c.bootstrap)
                if key not in grown:
                    grown[key] = fit_forest(ForestConfig(n_max, *key), t.X[t.split.train],
                                            t.y[t.split.train], seed)
                models[(ci, 0)] = grown[key].truncated(c.n_trees)
        else:
            for ci, c in enumerate(combos):
                _, hist = self_label(c, t.X, t.y, t.split, iterations=max(its), seed=seed)
                for it in its:
                    models[(ci, it)] = hist[min(it, len(hist) - 1)].forest
        for key, model in models.items():
            card = score_predictions(model.predict(t.X[test]), t.y[test], t.task_id)
            scores.setdefault(key, []).append(card)
    rows = [(combos[ci], it, aggregate(scores[(ci, it)])) for ci in range(len(combos)) for it in its]
    return ForestSelection(rows)
