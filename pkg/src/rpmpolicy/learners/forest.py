"""Random regression forest and honest causal forest."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._trees import MAX_BINS, Tree, TreeStack, bin_features, canonical_order, fit_bin_edges, grow_tree


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    min_leaf: int = 20
    max_depth: int = 12
    sample_fraction: float = 0.5
    mtry: int | None = None  # None -> ceil(sqrt(d))
    min_hess: float = 1e-3
    max_bins: int = MAX_BINS


def _mtry(cfg: ForestConfig, d: int) -> int:
    return int(np.ceil(np.sqrt(d))) if cfg.mtry is None else int(cfg.mtry)


def _tree_seeds(seed: int, n: int) -> np.ndarray:
    return np.random.SeedSequence([int(seed), 77]).generate_state(n, dtype=np.uint32)


@dataclass
class RegressionForest:
    """Average of trees grown on half-subsamples."""

    trees: list[Tree] = field(default_factory=list)
    target_mean: float = 0.0

    def __post_init__(self):
        self._stack = TreeStack(self.trees)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if not self.trees:
            return np.full(X.shape[0], self.target_mean)
        return self._stack.sum(X) / len(self.trees)

    def to_dict(self) -> dict:
        return {"kind": "regression_forest", "target_mean": self.target_mean,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionForest":
        return cls([Tree.from_dict(t) for t in d["trees"]], d["target_mean"])


def fit_regression_forest(X, y, config: ForestConfig | None = None, seed: int = 0) -> RegressionForest:
    cfg = config or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("non-finite entries in training data")
    order = canonical_order(X, y)
    X, y = np.ascontiguousarray(X[order]), y[order]
    n, d = X.shape
    edges = fit_bin_edges(X, cfg.max_bins)
    Xb = bin_features(X, edges)
    m = max(1, int(round(cfg.sample_fraction * n)))
    trees = []
    h = np.ones(n)
    for ts in _tree_seeds(seed, cfg.n_trees):
        rng = np.random.default_rng(int(ts))
        rows = np.sort(rng.choice(n, size=m, replace=False))
        tree, *_ = grow_tree(Xb, edges, -y, h, rows, max_depth=cfg.max_depth,
                             min_leaf=cfg.min_leaf, mtry=_mtry(cfg, d), seed=int(ts))
        trees.append(tree)
    return RegressionForest(trees, float(y.mean()))


# --------------------------------------------------------------------------
# Honest causal forest


def _parents(tree: Tree) -> np.ndarray:
    parent = np.full(tree.n_nodes, -1, dtype=np.int64)
    for k in np.flatnonzero(tree.left >= 0):
        parent[tree.left[k]] = k
        parent[tree.right[k]] = k
    return parent


@dataclass
class HonestCausalForest:
    """Residual-on-residual effect forest with disjoint structure/estimation halves.

    Each tree is grown on one half of a subsample using the split gain of
    the partially linear model ``y~ = tau * w~``; its leaf effects are then
    re-estimated as ``sum(w~ y~) / sum(w~^2)`` on the other half.
    """

    trees: list[Tree] = field(default_factory=list)
    ate: float = 0.0

    def __post_init__(self):
        self._stack = TreeStack(self.trees)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if not self.trees:
            return np.full(X.shape[0], self.ate)
        return self._stack.sum(X) / len(self.trees)

    def to_dict(self) -> dict:
        return {"kind": "honest_causal_forest", "ate": self.ate,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "HonestCausalForest":
        return cls([Tree.from_dict(t) for t in d["trees"]], d["ate"])


def honest_leaf_values(tree: Tree, X_est, y_res, w_res, min_hess: float, fallback: float,
                       presorted: bool = False) -> np.ndarray:
    """Leaf effects from estimation rows; thin leaves inherit the nearest adequate ancestor.

    Sums are accumulated over rows in canonical content order, so any
    permutation of the estimation rows yields bitwise identical values.
    ``presorted`` skips the sort for rows already in that order.
    """
    X_est = np.asarray(X_est, dtype=float)
    order = np.arange(X_est.shape[0]) if presorted else canonical_order(X_est, y_res, w_res)
    leaf = tree.apply(X_est[order])
    A = np.zeros(tree.n_nodes)
    B = np.zeros(tree.n_nodes)
    np.add.at(A, leaf, (w_res * y_res)[order])
    np.add.at(B, leaf, (w_res * w_res)[order])
    parent = _parents(tree)
    # propagate sums to ancestors (children always have larger ids than parents)
    for k in range(tree.n_nodes - 1, 0, -1):
        A[parent[k]] += A[k]
        B[parent[k]] += B[k]
    value = np.empty(tree.n_nodes)
    for k in range(tree.n_nodes):
        if B[k] >= min_hess:
            value[k] = A[k] / B[k]
        elif parent[k] >= 0:
            value[k] = value[parent[k]]
        else:
            value[k] = fallback
    return value


def fit_causal_forest(X, y_res, w_res, config: ForestConfig | None = None, seed: int = 0) -> HonestCausalForest:
    """Fit on centred outcomes ``y_res = y - m(x)`` and treatments ``w_res = w - e(x)``."""
    cfg = config or ForestConfig()
    X = np.asarray(X, dtype=float)
    y_res = np.asarray(y_res, dtype=float)
    w_res = np.asarray(w_res, dtype=float)
    if not (np.isfinite(X).all() and np.isfinite(y_res).all() and np.isfinite(w_res).all()):
        raise ValueError("non-finite entries in training data")
    order = canonical_order(X, y_res, w_res)
    X, y_res, w_res = np.ascontiguousarray(X[order]), y_res[order], w_res[order]
    n, d = X.shape
    ww = float(np.sum(w_res * w_res))
    ate = float(np.sum(w_res * y_res) / ww) if ww > 0 else 0.0
    edges = fit_bin_edges(X, cfg.max_bins)
    Xb = bin_features(X, edges)
    g = -w_res * y_res
    h = w_res * w_res
    m = max(2, int(round(cfg.sample_fraction * n)))
    trees = []
    for ts in _tree_seeds(seed, cfg.n_trees):
        rng = np.random.default_rng(int(ts))
        sub = rng.choice(n, size=m, replace=False)
        half = m // 2
        struct = np.sort(sub[:half])
        est = np.sort(sub[half:])
        tree, *_ = grow_tree(Xb, edges, g, h, struct, max_depth=cfg.max_depth,
                             min_leaf=cfg.min_leaf, min_hess=cfg.min_hess, mtry=_mtry(cfg, d),
                             seed=int(ts))
        # est is sorted and X is in canonical order, so the rows need no re-sort
        tree.value = honest_leaf_values(tree, X[est], y_res[est], w_res[est], cfg.min_hess, ate,
                                        presorted=True)
        trees.append(tree)
    return HonestCausalForest(trees, ate)
