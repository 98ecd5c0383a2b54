"""Decision trees, random forests and gradient boosted trees."""
from __future__ import annotations

import math
import threading
import weakref
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _tree_core as core


class BoostingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    weight: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return core.predict_tree(np.ascontiguousarray(X, dtype=float), self.feature, self.threshold,
                                 self.left, self.right, self.value)

    def add_contributions(self, X: np.ndarray, out: np.ndarray, scale: float = 1.0) -> None:
        buf = np.zeros_like(out)
        core.tree_contributions(np.ascontiguousarray(X, dtype=float), self.feature, self.threshold,
                                self.left, self.right, self.value, buf)
        out += scale * buf

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value",
                                                       "weight", "gain")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        ints = ("feature", "left", "right")
        return cls(**{k: np.asarray(v, dtype=np.int64 if k in ints else float) for k, v in d.items()})


def name_order(feature_names) -> np.ndarray:
    """Column indices sorted by feature name (split tie-break order)."""
    return np.array(sorted(range(len(feature_names)), key=lambda i: feature_names[i]), dtype=np.int64)


@dataclass(frozen=True)
class _Ranked:
    """Presorted columns, computed once per fit."""

    order: np.ndarray  # p x n, rows sorted by each column
    sorted_ranks: np.ndarray  # p x n, rank of order[f, t] among the column's distinct values
    uniq: np.ndarray
    offsets: np.ndarray


_RANK_CACHE: dict = {}


def _columns(X) -> _Ranked:
    """Ranks for X, cached while X is alive so a grid over one matrix sorts once.

    X must not be modified in place between fits.
    """
    if isinstance(X, np.ndarray):
        hit = _RANK_CACHE.get(id(X))
        if hit is not None and hit[0]() is X and hit[1] == X.shape:
            return hit[2]
    ranked = _rank_columns(X)
    if isinstance(X, np.ndarray):
        ref = weakref.ref(X, lambda _r, key=id(X): _RANK_CACHE.pop(key, None))
        _RANK_CACHE[id(X)] = (ref, X.shape, ranked)
    return ranked


def _rank_columns(X) -> _Ranked:
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    order = np.empty((p, n), dtype=np.int32)
    sorted_ranks = np.empty((p, n), dtype=np.int32)
    uniq, offsets = [], [0]
    for f in range(p):
        col = X[:, f]
        o = np.argsort(col, kind="stable")
        sorted_col = col[o]
        new = np.r_[True, sorted_col[1:] != sorted_col[:-1]]
        sorted_ranks[f] = np.cumsum(new) - 1
        order[f] = o
        uniq.append(sorted_col[new])
        offsets.append(offsets[-1] + int(new.sum()))
    return _Ranked(order, sorted_ranks, np.concatenate(uniq) if uniq else np.empty(0),
                   np.array(offsets, dtype=np.int64))


_scratch = threading.local()


def _workspace(shape):
    """Per-thread p x n scratch pair, reused across trees of the same shape."""
    ws = getattr(_scratch, "ws", None)
    if ws is None or ws[0].shape != shape:
        ws = (np.empty(shape, dtype=np.int32), np.empty(shape, dtype=np.int32))
        _scratch.ws = ws
    return ws


def _grow(XT: _Ranked, y, w, h, order, max_depth, min_samples_split, min_samples_leaf, max_features, key,
          leaf_mode=0, reg=0.0) -> Tree:
    seg, srk = _workspace(XT.order.shape)
    arrays = core.build_tree(
        XT.order,
        XT.sorted_ranks,
        XT.uniq,
        XT.offsets,
        np.ascontiguousarray(y, dtype=float),
        np.ascontiguousarray(w, dtype=float),
        np.ascontiguousarray(h, dtype=float),
        order,
        -1 if max_depth is None else int(max_depth),
        float(min_samples_split),
        float(min_samples_leaf),
        int(max_features),
        np.uint64(key),
        leaf_mode,
        float(reg),
        seg,
        srk,
    )
    return Tree(*arrays)


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)} labels")
    if len(y) == 0:
        raise ValueError("empty training set")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    return X, y


def fit_tree(X, y, feature_names, max_depth=None, min_samples_split=2, min_samples_leaf=1) -> Tree:
    X, y = _check_xy(X, y)
    ones = np.ones(len(y))
    return _grow(_columns(X), y, ones, ones, name_order(feature_names), max_depth, min_samples_split,
                 min_samples_leaf, X.shape[1], 0)


def resolve_max_features(max_features, p: int) -> int:
    if max_features in (None, "all"):
        return p
    if max_features == "sqrt":
        return max(1, int(math.sqrt(p)))
    if max_features == "log2":
        return max(1, int(math.log2(p))) if p > 1 else 1
    if isinstance(max_features, float) and 0 < max_features <= 1:
        return max(1, int(round(max_features * p)))
    k = int(max_features)
    if k < 1:
        raise ValueError("max_features must be >= 1")
    return min(k, p)


def tree_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one tree: keyed by (seed, tree index)."""
    return np.random.Generator(np.random.Philox(key=np.array([seed % 2**64, index], dtype=np.uint64)))


def fit_forest(X, y, feature_names, n_trees=100, max_depth=None, min_samples_split=2, min_samples_leaf=1,
               max_features="sqrt", bootstrap=True, max_samples=1.0, seed=0, jobs=1) -> list[Tree]:
    X, y = _check_xy(X, y)
    n, p = X.shape
    k = resolve_max_features(max_features, p)
    order = name_order(feature_names)
    ones = np.ones(n)
    draw = max(1, int(round(max_samples * n)))
    XT = _columns(X)

    def one(t):
        rng = tree_rng(seed, t)
        if bootstrap:
            w = np.bincount(rng.integers(0, n, draw), minlength=n).astype(float)
        else:
            w = ones
        key = int(rng.integers(0, 2**63 - 1))
        return _grow(XT, y, w, ones, order, max_depth, min_samples_split, min_samples_leaf, k, key)

    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(n_trees)))
    return [one(t) for t in range(n_trees)]


def predict_forest(trees, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=float)
    if not trees:
        return np.full(len(X), 0.5)
    total = np.zeros(len(X))
    for t in trees:
        total += t.predict(X)
    return total / len(trees)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def log_loss(y, p) -> float:
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def fit_boosting(X, y, feature_names, n_rounds=100, learning_rate=0.1, max_depth=3, min_samples_split=2,
                 min_samples_leaf=1, reg_lambda=1.0, subsample=1.0, seed=0):
    """Stagewise Newton boosting on logistic loss.

    Returns (base_score, trees, loss_trace). ``loss_trace[r]`` is the training
    log-loss after r rounds (entry 0 is the constant model).
    """
    X, y = _check_xy(X, y)
    n, p = X.shape
    order = name_order(feature_names)
    prevalence = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    base = math.log(prevalence / (1 - prevalence))
    F = np.full(n, base)
    trace = [log_loss(y, _sigmoid(F))]
    trees = []
    Xc = np.ascontiguousarray(X)
    XT = _columns(X)
    for r in range(n_rounds):
        prob = _sigmoid(F)
        resid = y - prob
        hess = prob * (1 - prob)
        rng = tree_rng(seed, r)
        if subsample < 1.0:
            w = (rng.random(n) < subsample).astype(float)
        else:
            w = np.ones(n)
        tree = _grow(XT, resid, w, hess, order, max_depth, min_samples_split, min_samples_leaf, p, 0,
                     leaf_mode=1, reg=reg_lambda)
        F = F + learning_rate * tree.predict(Xc)
        loss = log_loss(y, _sigmoid(F))
        if not math.isfinite(loss) or not np.all(np.isfinite(F)):
            raise BoostingError(f"non-finite training loss at boosting round {r}")
        trees.append(tree)
        trace.append(loss)
    return base, trees, trace


def predict_boosting(base, trees, learning_rate, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=float)
    F = np.full(len(X), base)
    for t in trees:
        F += learning_rate * t.predict(X)
    return _sigmoid(F)


def impurity_importances(trees, n_features: int, average: bool) -> np.ndarray:
    """Total split gain per feature, normalised to sum to 1.

    ``average`` normalises each tree first and then averages (forests);
    otherwise raw gains are pooled across trees (boosting).
    """
    total = np.zeros(n_features)
    for t in trees:
        g = np.zeros(n_features)
        internal = t.feature >= 0
        np.add.at(g, t.feature[internal], t.gain[internal])
        if average:
            s = g.sum()
            if s > 0:
                total += g / s
        else:
            total += g
    s = total.sum()
    return total / s if s > 0 else total
