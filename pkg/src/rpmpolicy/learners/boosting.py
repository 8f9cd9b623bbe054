"""Gradient-boosted trees: squared-error regressor and one-vs-rest classifier."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._trees import MAX_BINS, Tree, TreeStack, bin_features, canonical_order, fit_bin_edges, grow_tree


class InsufficientSupportError(ValueError):
    """An action class has too few rows to fit a model for it."""


# (n_trees, max_depth, learning_rate)
DEFAULT_GRID = ((150, 2, 0.1), (150, 3, 0.1), (200, 4, 0.05))


@dataclass(frozen=True)
class BoostConfig:
    grid: tuple[tuple[int, int, float], ...] = DEFAULT_GRID
    min_leaf: int = 20
    cv_folds: int = 3
    max_bins: int = MAX_BINS
    l2: float = 1.0
    # keep the fewest trees whose CV loss is within one paired standard error of the best
    one_se: bool = False


@dataclass
class Regressor:
    """Sum of regression trees: ``base_score + learning_rate * sum(tree outputs)``."""

    base_score: float
    learning_rate: float
    trees: list[Tree] = field(default_factory=list)
    max_depth: int = 0
    min_leaf: int = 20
    cv_mse: float = float("nan")

    def __post_init__(self):
        self._stack = TreeStack(self.trees)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.base_score + self.learning_rate * self._stack.sum(X)

    def to_dict(self) -> dict:
        return {"kind": "regressor", "base_score": self.base_score,
                "learning_rate": self.learning_rate, "max_depth": self.max_depth,
                "min_leaf": self.min_leaf, "cv_mse": self.cv_mse,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "Regressor":
        return cls(base_score=d["base_score"], learning_rate=d["learning_rate"],
                   trees=[Tree.from_dict(t) for t in d["trees"]], max_depth=d["max_depth"],
                   min_leaf=d["min_leaf"], cv_mse=d.get("cv_mse", float("nan")))


def _check_xy(X, y, min_rows=10):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"shape mismatch: X {X.shape}, y {y.shape}")
    if X.shape[0] < min_rows:
        raise ValueError(f"need at least {min_rows} rows, got {X.shape[0]}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("non-finite entries in training data")
    return X, y


def _boost_squared(Xb, edges, X, y, rows, n_trees, depth, lr, min_leaf, l2, eval_rows=None):
    """Fit on ``rows``; optionally track staged MSE on ``eval_rows``."""
    base = float(y[rows].mean())
    pred = np.full(y.size, base)
    h = np.ones(y.size)
    trees = []
    staged = [] if eval_rows is None else [float(np.mean((base - y[eval_rows]) ** 2))]
    for _ in range(n_trees):
        tree, *_ = grow_tree(Xb, edges, pred - y, h, rows, max_depth=depth, min_leaf=min_leaf, lam=l2)
        if tree.n_nodes == 1:
            break
        trees.append(tree)
        pred += lr * tree.predict_binned(Xb)
        if eval_rows is not None:
            staged.append(float(np.mean((pred[eval_rows] - y[eval_rows]) ** 2)))
    return base, trees, staged


def _cross_validate(cfg: BoostConfig, n: int, seed: int, stream: int, staged_loss):
    """Pick ``(n_trees, depth, lr)`` minimising K-fold loss.

    Each grid point fixes depth and learning rate and caps the tree count;
    the staged held-out loss curve (starting from the constant model) also
    selects how many of those trees to keep.  ``staged_loss`` returns either
    mean losses per stage or per-row losses (stages x held-out rows).  With
    ``cfg.one_se`` (per-row losses required) the tree count shrinks to the
    smallest whose row-paired loss excess over the minimum is within one
    standard error.
    """
    if len(cfg.grid) == 1 or n < 2 * cfg.cv_folds:
        return cfg.grid[0], float("nan")
    folds = np.random.default_rng(np.random.SeedSequence([seed, stream])).permutation(n) % cfg.cv_folds
    best, best_loss = None, np.inf
    for n_trees, depth, lr in cfg.grid:
        rows = []
        for k in range(cfg.cv_folds):
            tr, te = np.flatnonzero(folds != k), np.flatnonzero(folds == k)
            staged = np.asarray(staged_loss(tr, te, n_trees, depth, lr))
            if staged.ndim == 1:
                staged = np.broadcast_to(staged[:, None], (staged.size, te.size))
            # fits that stop early keep their last loss
            rows.append(np.pad(staged, ((0, n_trees + 1 - staged.shape[0]), (0, 0)), mode="edge"))
        loss = np.hstack(rows)  # (stages, n)
        curve = loss.mean(axis=1)
        m = int(np.argmin(curve))
        if curve[m] < best_loss:
            m_keep = m
            if cfg.one_se:
                excess = loss - loss[m]
                se = excess.std(axis=1) / np.sqrt(n)
                m_keep = int(np.flatnonzero(excess.mean(axis=1) <= se)[0])
            best, best_loss = (m_keep, depth, lr), float(curve[m])
    return best, best_loss


def fit_regressor(X, y, config: BoostConfig | None = None, seed: int = 0) -> Regressor:
    """Squared-error gradient boosting with the grid point chosen by K-fold CV.

    Rows are put in a canonical content order first, so a permuted copy of
    the same data gives an identical model.
    """
    cfg = config or BoostConfig()
    X, y = _check_xy(X, y)
    order = canonical_order(X, y)
    X, y = np.ascontiguousarray(X[order]), y[order]
    if np.ptp(y) == 0.0:
        return Regressor(base_score=float(y[0]), learning_rate=0.0, cv_mse=0.0)
    edges = fit_bin_edges(X, cfg.max_bins)
    Xb = bin_features(X, edges)
    n = y.size

    best, best_mse = _cross_validate(cfg, n, seed, 1, lambda tr, te, n_trees, depth, lr: _boost_squared(
        Xb, edges, X, y, tr, n_trees, depth, lr, cfg.min_leaf, cfg.l2, eval_rows=te)[2])
    n_trees, depth, lr = best
    base, trees, _ = _boost_squared(Xb, edges, X, y, np.arange(n), n_trees, depth, lr,
                                    cfg.min_leaf, cfg.l2)
    return Regressor(base_score=base, learning_rate=lr, trees=trees, max_depth=depth,
                     min_leaf=cfg.min_leaf, cv_mse=best_mse)


# --------------------------------------------------------------------------
# Classification


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _boost_logistic(Xb, edges, X, y, rows, n_trees, depth, lr, min_leaf, l2, eval_rows=None):
    p0 = float(np.clip(y[rows].mean(), 1e-6, 1 - 1e-6))
    base = float(np.log(p0 / (1 - p0)))
    f = np.full(y.size, base)
    trees = []
    staged = [] if eval_rows is None else [_row_logloss(y[eval_rows], f[eval_rows])]
    for _ in range(n_trees):
        p = _sigmoid(f)
        tree, *_ = grow_tree(Xb, edges, p - y, p * (1 - p), rows, max_depth=depth,
                             min_leaf=min_leaf, min_hess=1e-3, lam=l2)
        if tree.n_nodes == 1:
            break
        trees.append(tree)
        f += lr * tree.predict_binned(Xb)
        if eval_rows is not None:
            staged.append(_row_logloss(y[eval_rows], f[eval_rows]))
    return base, trees, staged


def _row_logloss(y, f):
    p = np.clip(_sigmoid(f), 1e-12, 1 - 1e-12)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


@dataclass
class BinaryBooster:
    """Logistic boosted trees; ``predict`` returns P(y=1)."""

    base_score: float
    learning_rate: float
    trees: list[Tree] = field(default_factory=list)

    def __post_init__(self):
        self._stack = TreeStack(self.trees)

    def decision_function(self, X) -> np.ndarray:
        return self.base_score + self.learning_rate * self._stack.sum(np.asarray(X, dtype=float))

    def predict(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def to_dict(self) -> dict:
        return {"kind": "binary_booster", "base_score": self.base_score,
                "learning_rate": self.learning_rate, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "BinaryBooster":
        return cls(d["base_score"], d["learning_rate"], [Tree.from_dict(t) for t in d["trees"]])


def fit_binary(X, y, config: BoostConfig | None = None, seed: int = 0,
               _binned=None) -> BinaryBooster:
    cfg = config or BoostConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if _binned is None:
        order = canonical_order(X, y)
        X, y = np.ascontiguousarray(X[order]), y[order]
        edges = fit_bin_edges(X, cfg.max_bins)
        Xb = bin_features(X, edges)
    else:
        Xb, edges = _binned
    n = y.size
    best, _ = _cross_validate(cfg, n, seed, 2, lambda tr, te, n_trees, depth, lr: _boost_logistic(
        Xb, edges, X, y, tr, n_trees, depth, lr, cfg.min_leaf, cfg.l2, eval_rows=te)[2])
    n_trees, depth, lr = best
    base, trees, _ = _boost_logistic(Xb, edges, X, y, np.arange(n), n_trees, depth, lr,
                                     cfg.min_leaf, cfg.l2)
    return BinaryBooster(base, lr, trees)


def clip_and_renormalize(p: np.ndarray, floor: float) -> np.ndarray:
    """Project each row onto the simplex with every entry at least ``floor``.

    Entries below the floor are pinned to it and the remaining mass is
    rescaled proportionally; repeated until no entry falls below.
    """
    p = np.asarray(p, dtype=float)
    k = p.shape[-1]
    if floor * k > 1.0:
        raise ValueError("floor too large for the number of classes")
    p = p / p.sum(axis=-1, keepdims=True)
    pinned = np.zeros(p.shape, dtype=bool)
    for _ in range(k):
        low = (p < floor) & ~pinned
        if not low.any():
            break
        pinned |= low
        free_mass = 1.0 - floor * pinned.sum(axis=-1, keepdims=True)
        free = np.where(pinned, 0.0, p)
        free_sum = free.sum(axis=-1, keepdims=True)
        scale = np.divide(free_mass, free_sum, out=np.zeros_like(free_sum), where=free_sum > 0)
        p = np.where(pinned, floor, free * scale)
    return np.maximum(p, floor)


@dataclass
class PropensityModel:
    """One-vs-rest boosted classifiers normalised to a distribution over classes."""

    models: list[BinaryBooster]
    clip_floor: float = 0.01

    @property
    def n_classes(self) -> int:
        return len(self.models)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        raw = np.column_stack([m.predict(X) for m in self.models])
        raw = np.maximum(raw, 1e-12)
        return clip_and_renormalize(raw, self.clip_floor)

    def to_dict(self) -> dict:
        return {"kind": "propensity", "clip_floor": self.clip_floor,
                "models": [m.to_dict() for m in self.models]}

    @classmethod
    def from_dict(cls, d: dict) -> "PropensityModel":
        return cls([BinaryBooster.from_dict(m) for m in d["models"]], d["clip_floor"])


PROPENSITY_CONFIG = BoostConfig(grid=((100, 2, 0.1), (150, 3, 0.05), (60, 3, 0.1)), one_se=True)


def fit_propensity(Xc, actions, clip_floor: float = 0.01, seed: int = 0,
                   n_classes: int | None = None, min_support: int = 20,
                   config: BoostConfig | None = None) -> PropensityModel:
    """Per-class probabilities of the logged action given covariates ``Xc``."""
    cfg = config or PROPENSITY_CONFIG
    Xc = np.asarray(Xc, dtype=float)
    actions = np.asarray(actions, dtype=int)
    k = int(actions.max()) + 1 if n_classes is None else int(n_classes)
    counts = np.bincount(actions, minlength=k)
    short = [a for a in range(k) if counts[a] < min_support]
    if short:
        raise InsufficientSupportError(
            f"classes {short} have fewer than {min_support} rows (counts {counts.tolist()})")
    if not np.isfinite(Xc).all():
        raise ValueError("non-finite covariates")
    order = canonical_order(Xc, actions)
    Xc, actions = np.ascontiguousarray(Xc[order]), actions[order]
    edges = fit_bin_edges(Xc, cfg.max_bins)
    Xb = bin_features(Xc, edges)
    models = [fit_binary(Xc, (actions == a).astype(float), cfg, seed=seed + 7919 * a,
                         _binned=(Xb, edges)) for a in range(k)]
    return PropensityModel(models, clip_floor)


# --------------------------------------------------------------------------
# Importance


def permutation_importance(predict, X, y, seed: int = 0, n_repeats: int = 3) -> np.ndarray:
    """Mean increase in MSE when each column is shuffled."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    base = np.mean((predict(X) - y) ** 2)
    rng = np.random.default_rng(seed)
    out = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        for _ in range(n_repeats):
            Xp = X.copy()
            Xp[:, j] = rng.permutation(Xp[:, j])
            out[j] += np.mean((predict(Xp) - y) ** 2) - base
    return out / n_repeats
