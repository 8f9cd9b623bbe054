"""Conditional average treatment effect estimators over a discrete action set.

Every model predicts an (n, n_actions) table whose column 0 (control) is
exactly zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boosting import (
    BinaryBooster,
    BoostConfig,
    InsufficientSupportError,
    PropensityModel,
    Regressor,
    fit_binary,
    fit_propensity,
    fit_regressor,
)
from .forest import (
    ForestConfig,
    HonestCausalForest,
    RegressionForest,
    fit_causal_forest,
    fit_regression_forest,
)

METHODS = ("s_learner", "t_learner", "x_learner", "causal_forest", "dr_forest", "ensemble")
BASE_METHODS = METHODS[:-1]
ARTIFACT_VERSION = 1
MIN_SUPPORT = 20

CAUSAL_FOREST = ForestConfig(n_trees=200, min_leaf=20, min_hess=2.0)
DR_FOREST = ForestConfig(n_trees=200, min_leaf=20)
# single grid point for cross-fitted nuisances inside the forests
NUISANCE_BOOST = BoostConfig(grid=((100, 3, 0.1),))


class NonFiniteError(ValueError):
    """An intermediate quantity became NaN or infinite."""


_KINDS = {
    "regressor": Regressor,
    "binary_booster": BinaryBooster,
    "propensity": PropensityModel,
    "regression_forest": RegressionForest,
    "honest_causal_forest": HonestCausalForest,
}  # TableCate registers below


def _encode(obj):
    if obj is None or isinstance(obj, (int, float, str)):
        return obj
    if isinstance(obj, CateModel):
        return obj.to_dict()
    if isinstance(obj, np.ndarray):
        return {"kind": "array", "data": obj.tolist()}
    if isinstance(obj, (list, tuple)):
        return [_encode(x) for x in obj]
    if isinstance(obj, dict):
        return {"kind": "map", "items": {k: _encode(v) for k, v in obj.items()}}
    return obj.to_dict()


def _decode(d):
    if d is None or isinstance(d, (int, float, str)):
        return d
    if isinstance(d, list):
        return [_decode(x) for x in d]
    kind = d.get("kind")
    if kind == "array":
        return np.asarray(d["data"], dtype=float)
    if kind == "map":
        return {k: _decode(v) for k, v in d["items"].items()}
    if kind == "cate":
        return CateModel.from_dict(d)
    return _KINDS[kind].from_dict(d)


@dataclass
class CateModel:
    method: str
    n_actions: int
    components: dict = field(default_factory=dict)
    state_mode: str = ""
    action_scheme: str = ""
    feature_names: tuple[str, ...] = ()
    train_patients: tuple[int, ...] = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown CATE method {self.method!r}")

    def predict(self, S) -> np.ndarray:
        S = np.asarray(S, dtype=float)
        n, k = S.shape[0], self.n_actions
        out = np.zeros((n, k))
        c = self.components
        if self.method == "s_learner":
            f = c["f"]
            base = f.predict(_with_action(S, 0, k))
            for a in range(1, k):
                out[:, a] = f.predict(_with_action(S, a, k)) - base
        elif self.method == "t_learner":
            mu0 = c["mu"][0].predict(S)
            for a in range(1, k):
                out[:, a] = c["mu"][a].predict(S) - mu0
        elif self.method == "x_learner":
            e0 = c["propensity"].predict_proba(S)[:, 0]
            for a in range(1, k):
                out[:, a] = e0 * c["g_treated"][a].predict(S) + (1 - e0) * c["g_control"][a].predict(S)
        elif self.method in ("causal_forest", "dr_forest"):
            for a in range(1, k):
                out[:, a] = c["forests"][a].predict(S)
        elif self.method == "ensemble":
            w = c["weights"]
            for wj, m in zip(w, c["members"]):
                if wj != 0.0:
                    out += wj * m.predict(S)
        out[:, 0] = 0.0
        if not np.isfinite(out).all():
            raise NonFiniteError(f"{self.method} produced non-finite effects")
        return out

    # --- serialisation -------------------------------------------------
    def to_dict(self) -> dict:
        return {"kind": "cate", "version": ARTIFACT_VERSION, "method": self.method,
                "n_actions": self.n_actions, "state_mode": self.state_mode,
                "action_scheme": self.action_scheme, "feature_names": list(self.feature_names),
                "train_patients": list(self.train_patients),
                "components": {k: _encode(v) for k, v in self.components.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "CateModel":
        if d.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"unsupported model artifact version {d.get('version')}")
        return cls(method=d["method"], n_actions=d["n_actions"],
                   components={k: _decode(v) for k, v in d["components"].items()},
                   state_mode=d["state_mode"], action_scheme=d["action_scheme"],
                   feature_names=tuple(d["feature_names"]),
                   train_patients=tuple(d["train_patients"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "CateModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TableCate:
    """Fixed effect table standing in for a model (oracle effects, test fixtures)."""

    table: np.ndarray

    def to_dict(self) -> dict:
        return {"kind": "table", "table": np.asarray(self.table).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TableCate":
        return cls(np.asarray(d["table"], dtype=float))

    def predict(self, S) -> np.ndarray:
        if np.shape(S)[0] != self.table.shape[0]:
            raise ValueError("row count differs from the stored table")
        out = np.array(self.table, dtype=float)
        out[:, 0] = 0.0
        return out


def _with_action(S: np.ndarray, a, k: int) -> np.ndarray:
    onehot = np.zeros((S.shape[0], k))
    if np.ndim(a) == 0:
        onehot[:, int(a)] = 1.0
    else:
        onehot[np.arange(S.shape[0]), np.asarray(a, dtype=int)] = 1.0
    return np.hstack([S, onehot])


def check_support(actions, n_actions: int, min_support: int = MIN_SUPPORT) -> np.ndarray:
    counts = np.bincount(np.asarray(actions, dtype=int), minlength=n_actions)
    short = [a for a in range(n_actions) if counts[a] < min_support]
    if short:
        raise InsufficientSupportError(
            f"action classes {short} have fewer than {min_support} rows (counts {counts.tolist()})")
    return counts


def _folds(groups, n_folds: int, seed: int) -> np.ndarray:
    uniq, inv = np.unique(groups, return_inverse=True)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 5])).permutation(uniq.size)
    return (perm % n_folds)[inv]


def fit_cate_arrays(method: str, S, actions, rewards, n_actions: int, seed: int = 0, *,
                    groups=None, Xc=None, boost: BoostConfig | None = None,
                    causal_forest: ForestConfig = CAUSAL_FOREST, dr_forest: ForestConfig = DR_FOREST,
                    clip_floor: float = 0.01, state_mode: str = "", action_scheme: str = "",
                    feature_names=(), min_support: int = MIN_SUPPORT) -> CateModel:
    """Fit one base CATE method on training arrays.

    ``groups`` (patient ids) define cross-fitting folds for the forests;
    ``Xc`` are control covariates used by ``dr_forest`` nuisances.  Every
    action class needs ``min_support`` training rows.
    """
    if method not in BASE_METHODS:
        raise ValueError(f"unknown base CATE method {method!r}")
    S = np.asarray(S, dtype=float)
    actions = np.asarray(actions, dtype=int)
    y = np.asarray(rewards, dtype=float)
    if not (np.isfinite(S).all() and np.isfinite(y).all()):
        raise NonFiniteError("non-finite training inputs")
    check_support(actions, n_actions, min_support)
    groups = np.arange(S.shape[0]) if groups is None else np.asarray(groups)
    k = n_actions
    comp: dict = {}
    if method == "s_learner":
        comp["f"] = fit_regressor(_with_action(S, actions, k), y, boost, seed)
    elif method == "t_learner":
        comp["mu"] = [fit_regressor(S[actions == a], y[actions == a], boost, seed + 31 * a)
                      for a in range(k)]
    elif method == "x_learner":
        mu = [fit_regressor(S[actions == a], y[actions == a], boost, seed + 31 * a) for a in range(k)]
        ctrl = actions == 0
        g_t, g_c = [None], [None]
        for a in range(1, k):
            tr = actions == a
            g_t.append(fit_regressor(S[tr], y[tr] - mu[0].predict(S[tr]), boost, seed + 53 * a))
            g_c.append(fit_regressor(S[ctrl], mu[a].predict(S[ctrl]) - y[ctrl], boost, seed + 59 * a))
        comp["g_treated"] = g_t
        comp["g_control"] = g_c
        comp["propensity"] = fit_propensity(S, actions, clip_floor, seed, n_classes=k,
                                            min_support=min_support, config=boost)
    elif method == "causal_forest":
        folds = _folds(groups, 2, seed)
        forests = [None]
        for a in range(1, k):
            sel = np.flatnonzero((actions == 0) | (actions == a))
            w = (actions[sel] == a).astype(float)
            m_hat, e_hat = _crossfit_partial(S[sel], y[sel], w, folds[sel], seed + a)
            forests.append(fit_causal_forest(S[sel], y[sel] - m_hat, w - e_hat, causal_forest,
                                             seed + 97 * a))
        comp["forests"] = forests
    elif method == "dr_forest":
        if Xc is None:
            raise ValueError("dr_forest needs control covariates")
        gamma = crossfit_dr_scores(np.asarray(Xc, dtype=float), actions, y, k, groups, seed, clip_floor)
        comp["forests"] = [None] + [fit_regression_forest(S, gamma[:, a], dr_forest, seed + 97 * a)
                                    for a in range(1, k)]
        comp["target_means"] = gamma.mean(axis=0)
    return CateModel(method, k, comp, state_mode, action_scheme, tuple(feature_names),
                     tuple(int(g) for g in np.unique(groups)) if groups is not None else ())


def _crossfit_partial(S, y, w, folds, seed):
    """Out-of-fold E[y|s] and P(w=1|s), propensities clipped to [0.01, 0.99]."""
    m_hat = np.empty(y.size)
    e_hat = np.empty(y.size)
    for f in np.unique(folds):
        tr, te = folds != f, folds == f
        if tr.sum() < 10:
            m_hat[te] = y.mean()
            e_hat[te] = w.mean()
            continue
        m_hat[te] = fit_regressor(S[tr], y[tr], NUISANCE_BOOST, seed).predict(S[te])
        if w[tr].min() == w[tr].max():
            e_hat[te] = w[tr].mean()
        else:
            e_hat[te] = fit_binary(S[tr], w[tr], NUISANCE_BOOST, seed).predict(S[te])
    return m_hat, np.clip(e_hat, 0.01, 0.99)


def crossfit_dr_scores(Xc, actions, y, n_actions: int, groups, seed: int = 0,
                       clip_floor: float = 0.01, n_folds: int = 2) -> np.ndarray:
    """Doubly robust scores on training rows with out-of-fold nuisances."""
    from ..evaluation import dr_scores_from_predictions, fit_outcome_model

    folds = _folds(groups, n_folds, seed)
    r_hat = np.empty((y.size, n_actions))
    e_hat = np.empty((y.size, n_actions))
    for f in range(n_folds):
        tr, te = folds != f, folds == f
        if not te.any():
            continue
        r_hat[te] = fit_outcome_model(Xc[tr], actions[tr], y[tr], n_actions, seed,
                                      NUISANCE_BOOST).predict(Xc[te])
        e_hat[te] = fit_propensity(Xc[tr], actions[tr], clip_floor, seed, n_classes=n_actions,
                                   min_support=1, config=NUISANCE_BOOST).predict_proba(Xc[te])
    return dr_scores_from_predictions(r_hat, e_hat, actions, y, clip_floor=clip_floor).gamma


# --------------------------------------------------------------------------
# Ensemble


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1}."""
    v = np.asarray(v, dtype=float)
    if not np.isfinite(v).all():
        raise NonFiniteError("cannot project non-finite weights")
    # the projection is unchanged by a common shift; centring on the max avoids cancellation
    v = v - v.max()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def ensemble_weights(preds: np.ndarray, target: np.ndarray, steps: int = 500,
                     step: float = 0.05) -> np.ndarray:
    """Simplex weights minimising mean squared error of ``preds @ w`` to ``target``.

    ``preds`` is (m, J) stacked candidate predictions.  The gradient is
    divided by the candidates' mean squared prediction so the fixed step
    size is scale free.
    """
    J = preds.shape[1]
    w = np.full(J, 1.0 / J)
    scale = float(np.mean(preds ** 2))
    if scale == 0.0:
        return w
    for _ in range(steps):
        resid = preds @ w - target
        grad = 2.0 * (preds.T @ resid) / resid.size / scale
        w = project_simplex(w - step * grad)
    return w


def fit_ensemble(candidates, S_val, dr_val, steps: int = 500, step: float = 0.05) -> CateModel:
    """Convex combination of candidate models fit to validation DR scores.

    ``dr_val`` is a DrScoreTable (or its (n, n_actions) score matrix) on the
    rows of ``S_val``; one global weight vector covers all actions.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("empty candidate list")
    gamma = getattr(dr_val, "gamma", dr_val)
    gamma = np.asarray(gamma, dtype=float)
    preds = [np.asarray(c.predict(S_val), dtype=float) for c in candidates]
    k = gamma.shape[1]
    P = np.column_stack([p[:, 1:k].ravel() for p in preds])
    w = ensemble_weights(P, gamma[:, 1:].ravel(), steps, step)
    first = candidates[0]
    return CateModel("ensemble", k, {"weights": w, "members": candidates},
                     getattr(first, "state_mode", ""), getattr(first, "action_scheme", ""),
                     tuple(getattr(first, "feature_names", ())),
                     tuple(getattr(first, "train_patients", ())))


_KINDS["table"] = TableCate
