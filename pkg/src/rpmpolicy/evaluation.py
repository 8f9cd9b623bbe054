"""Doubly robust offline evaluation of targeting policies.

Nuisance models (outcome and propensity) are fit on control covariates of
training patients; evaluation patients get a doubly robust score per action,
and policy values are averaged over decision days with per-day capacity.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from numba import njit

from .features import daily_counts
from .learners.boosting import BoostConfig, PropensityModel, Regressor, fit_propensity, fit_regressor
from .policy import best_actions, capacity_for, daily_policy
from .representations import TIDE_FEATURES
from .simulate import CONTROL, CapacityError, LoggedPanel, att_from_table

CONTROL_DEMOGRAPHICS = ("age", "sexF", "public_insurance", "english_primary_language", "using_aid")
HISTORY_WEEKS = (2, 3, 4)
DEFAULT_GRID = tuple(round(0.05 * j, 2) for j in range(1, 21))
_OLD_WEEK_BANDS = ("g", "very_low", "low", "in_range", "high")


class LeakageError(RuntimeError):
    """A model is being evaluated on patients it was trained on."""


# --------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitIndex:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.validation), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("splits overlap")

    def part(self, name: str) -> tuple[int, ...]:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitIndex":
        return cls(tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]))


def split_by_patient(patient_ids, seed: int) -> SplitIndex:
    """Shuffle patients and cut into thirds whose sizes differ by at most one."""
    ids = np.unique(np.asarray(patient_ids))
    if ids.size < 3:
        raise ValueError(f"need at least 3 patients, got {ids.size}")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 3])).permutation(ids)
    parts = np.array_split(perm, 3)
    return SplitIndex(*(tuple(sorted(int(x) for x in p)) for p in parts))


def assert_disjoint(trained_on, evaluated_on, what: str = "model") -> None:
    overlap = set(np.asarray(trained_on).tolist()) & set(np.asarray(evaluated_on).tolist())
    if overlap:
        raise LeakageError(f"{what} evaluated on {len(overlap)} of its training patients")


# --------------------------------------------------------------------------
# Control covariates


@dataclass
class ControlCovariates:
    matrix: np.ndarray
    names: tuple[str, ...]
    rows: np.ndarray  # positions in the source panel
    history_weeks: int
    dropped: int = 0


def control_covariate_names(history_weeks: int = 2) -> tuple[str, ...]:
    names = list(TIDE_FEATURES) + list(CONTROL_DEMOGRAPHICS)
    if history_weeks > 2:
        for w in range(3, history_weeks + 1):
            names += [f"{b}_week{w}" for b in _OLD_WEEK_BANDS]
        names += [f"msg_week{w}" for w in range(1, history_weeks + 1)]
    return tuple(names)


def build_control_covariates(panel: LoggedPanel, history_weeks: int = 2,
                             min_day: int | None = None) -> ControlCovariates:
    """Clinician-visible covariates per row, optionally with older weeks of history.

    Rows with fewer than ``7 * history_weeks`` days of preceding trace (or
    before ``min_day``) are dropped and counted.
    """
    if history_weeks not in HISTORY_WEEKS:
        raise ValueError(f"history_weeks must be one of {HISTORY_WEEKS}")
    rows = panel.rows
    day = rows["day"].to_numpy()
    first = max(7 * history_weeks, min_day or 0)
    keep = np.flatnonzero(day >= first)
    base = rows.iloc[keep][list(TIDE_FEATURES) + list(CONTROL_DEMOGRAPHICS)].to_numpy(dtype=float)
    cols = [base]
    if history_weeks > 2:
        cols.append(_older_history(panel, keep, history_weeks))
    return ControlCovariates(np.column_stack(cols), control_covariate_names(history_weeks), keep,
                             history_weeks, dropped=len(rows) - keep.size)


def _older_history(panel: LoggedPanel, keep: np.ndarray, history_weeks: int) -> np.ndarray:
    rows = panel.rows
    pid = rows["patient_id"].to_numpy()[keep]
    day = rows["day"].to_numpy()[keep]
    cur_fill = rows.iloc[keep][["g_7dr", "very_low_7dr", "low_7dr", "in_range_7dr", "high_7dr"]].to_numpy(float)
    n_old = history_weeks - 2
    out = np.zeros((keep.size, n_old * len(_OLD_WEEK_BANDS) + history_weeks))
    msg_days = {p: g["day"].to_numpy()[g["action_class"].to_numpy() != CONTROL]
                for p, g in rows[["patient_id", "day", "action_class"]].groupby("patient_id")}
    for p in np.unique(pid):
        sel = np.flatnonzero(pid == p)
        d = day[sel]
        counts = daily_counts(panel.traces[int(p)].astype(float))
        cum = {k: np.concatenate([[0.0], np.cumsum(v)]) for k, v in counts.items()}
        for j, w in enumerate(range(3, history_weeks + 1)):
            lo, hi = d - 7 * w, d - 7 * (w - 1)
            s = {k: cum[k][hi] - cum[k][lo] for k in ("gsum", "n", "very_low", "low", "high")}
            n = s["n"]
            ok = n > 0
            nz = np.where(ok, n, 1.0)
            vals = np.column_stack([s["gsum"] / nz, s["very_low"] / nz, s["low"] / nz,
                                    (n - s["low"] - s["high"]) / nz, s["high"] / nz])
            # a week without readings repeats the latest week
            vals = np.where(ok[:, None], vals, cur_fill[sel])
            out[sel, j * 5:(j + 1) * 5] = vals
        md = msg_days.get(p, np.zeros(0, dtype=int))
        for w in range(1, history_weeks + 1):
            lo, hi = d - 7 * w, d - 7 * (w - 1)  # messages on days [lo, hi)
            hit = ((md[None, :] >= lo[:, None]) & (md[None, :] < hi[:, None])).any(axis=1)
            out[sel, n_old * 5 + w - 1] = hit
    return out


def evaluation_rows(panel: LoggedPanel, stride: int = 7) -> np.ndarray:
    """Row positions on every ``stride``-th calendar day (shared across patients)."""
    day = panel.rows["day"].to_numpy()
    return np.flatnonzero(day % stride == 0) if stride > 1 else np.arange(day.size)


# --------------------------------------------------------------------------
# Nuisances


@dataclass
class OutcomeModel:
    """Per-action reward regressors r(x, a)."""

    models: list[Regressor]

    @property
    def n_actions(self) -> int:
        return len(self.models)

    def predict(self, X) -> np.ndarray:
        return np.column_stack([m.predict(X) for m in self.models])

    def to_dict(self) -> dict:
        return {"kind": "outcome", "models": [m.to_dict() for m in self.models]}

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeModel":
        return cls([Regressor.from_dict(m) for m in d["models"]])


def fit_outcome_model(X, actions, rewards, n_actions: int, seed: int = 0,
                      config: BoostConfig | None = None) -> OutcomeModel:
    X = np.asarray(X, dtype=float)
    actions = np.asarray(actions, dtype=int)
    rewards = np.asarray(rewards, dtype=float)
    models = []
    for a in range(n_actions):
        sel = actions == a
        models.append(fit_regressor(X[sel], rewards[sel], config, seed=seed + 101 * a))
    return OutcomeModel(models)


@dataclass
class Nuisances:
    outcome: OutcomeModel
    propensity: PropensityModel
    names: tuple[str, ...]
    history_weeks: int = 2
    train_patients: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"version": 1, "outcome": self.outcome.to_dict(),
                "propensity": self.propensity.to_dict(), "names": list(self.names),
                "history_weeks": self.history_weeks, "train_patients": list(self.train_patients)}

    @classmethod
    def from_dict(cls, d: dict) -> "Nuisances":
        return cls(OutcomeModel.from_dict(d["outcome"]), PropensityModel.from_dict(d["propensity"]),
                   tuple(d["names"]), d["history_weeks"], tuple(d["train_patients"]))


def fit_nuisances(Xc, actions, rewards, n_actions: int, seed: int = 0, clip_floor: float = 0.01,
                  names=(), history_weeks: int = 2, train_patients=(), min_support: int = 20) -> Nuisances:
    outcome = fit_outcome_model(Xc, actions, rewards, n_actions, seed)
    prop = fit_propensity(Xc, actions, clip_floor, seed, n_classes=n_actions, min_support=min_support)
    return Nuisances(outcome, prop, tuple(names), history_weeks,
                     tuple(int(p) for p in np.unique(train_patients)))


# --------------------------------------------------------------------------
# Doubly robust scores


@dataclass
class DrScoreTable:
    patient_id: np.ndarray
    day: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    gamma: np.ndarray  # (n, n_actions), column 0 identically 0

    def __len__(self) -> int:
        return self.gamma.shape[0]

    @property
    def n_actions(self) -> int:
        return self.gamma.shape[1]

    def ate(self) -> np.ndarray:
        return self.gamma.mean(axis=0)

    def subset(self, rows) -> "DrScoreTable":
        rows = np.asarray(rows)
        return DrScoreTable(self.patient_id[rows], self.day[rows], self.action[rows],
                            self.reward[rows], self.gamma[rows])

    def scaled(self, c: float) -> "DrScoreTable":
        return DrScoreTable(self.patient_id, self.day, self.action, self.reward, self.gamma * c)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"patient_id": self.patient_id, "day": self.day,
                           "action": self.action, "reward": self.reward})
        for a in range(self.n_actions):
            df[f"gamma_{a}"] = self.gamma[:, a]
        return df


def dr_scores_from_predictions(r_hat, e_hat, actions, rewards, patient_id=None, day=None,
                               clip_floor: float | None = None) -> DrScoreTable:
    """Doubly robust score of every action for every row.

    ``r_hat`` and ``e_hat`` are (n, n_actions) outcome and propensity
    predictions at the row's covariates.
    """
    r_hat = np.asarray(r_hat, dtype=float)
    e_hat = np.asarray(e_hat, dtype=float)
    actions = np.asarray(actions, dtype=int)
    rewards = np.asarray(rewards, dtype=float)
    n, k = r_hat.shape
    if e_hat.shape != (n, k):
        raise ValueError("outcome and propensity predictions differ in shape")
    if clip_floor is not None and np.any(e_hat < clip_floor * (1 - 1e-9)):
        raise AssertionError("propensity below clip floor")
    if np.any(e_hat <= 0):
        raise ValueError("propensities must be positive")
    idx = np.arange(n)
    resid = rewards - r_hat[idx, actions]
    onehot = np.zeros((n, k))
    onehot[idx, actions] = 1.0
    ipw = onehot / e_hat - (actions == CONTROL)[:, None] / e_hat[:, [0]]
    gamma = (r_hat - r_hat[:, [0]]) + resid[:, None] * ipw
    gamma[:, 0] = 0.0
    if not np.isfinite(gamma).all():
        raise ValueError("non-finite doubly robust scores")
    pid = np.zeros(n, dtype=int) if patient_id is None else np.asarray(patient_id)
    d = np.zeros(n, dtype=int) if day is None else np.asarray(day)
    return DrScoreTable(pid, d, actions, rewards, gamma)


def dr_scores(Xc, actions, rewards, outcome, propensity, patient_id=None, day=None,
              train_patients=None) -> DrScoreTable:
    """DR scores from fitted nuisance models (or precomputed prediction tables)."""
    if train_patients is not None and patient_id is not None:
        assert_disjoint(train_patients, patient_id, "nuisance model")
    r_hat = outcome.predict(Xc) if hasattr(outcome, "predict") else outcome
    if hasattr(propensity, "predict_proba"):
        e_hat = propensity.predict_proba(Xc)
        floor = propensity.clip_floor
    else:
        e_hat, floor = propensity, None
    return dr_scores_from_predictions(r_hat, e_hat, actions, rewards, patient_id, day, floor)


def panel_dr_scores(panel: LoggedPanel, actions, nuisances: Nuisances, rows=None) -> DrScoreTable:
    """DR table for panel rows using the nuisances' covariate history length."""
    cov = build_control_covariates(panel, nuisances.history_weeks)
    if rows is not None:
        pos = np.searchsorted(cov.rows, rows)
        if np.any(pos >= cov.rows.size) or np.any(cov.rows[np.minimum(pos, cov.rows.size - 1)] != rows):
            raise ValueError("requested rows lack enough covariate history")
        X, take = cov.matrix[pos], np.asarray(rows)
    else:
        X, take = cov.matrix, cov.rows
    r = panel.rows
    return dr_scores(X, np.asarray(actions)[take], r["reward"].to_numpy()[take],
                     nuisances.outcome, nuisances.propensity,
                     r["patient_id"].to_numpy()[take], r["day"].to_numpy()[take],
                     train_patients=nuisances.train_patients)


# --------------------------------------------------------------------------
# Policy value


def estimate_att(assignments: pd.DataFrame, dr_table: DrScoreTable, K) -> float:
    """(1/T) sum_t (1/K_t) sum_i Gamma_it(pi_i) over the table's rows.

    ``assignments`` holds patient_id, day, action_class; table rows without
    an assignment count as control.
    """
    key = pd.DataFrame({"patient_id": dr_table.patient_id, "day": dr_table.day})
    m = key.merge(assignments[["patient_id", "day", "action_class"]], on=["patient_id", "day"],
                  how="left", validate="one_to_one")
    acts = m["action_class"].fillna(CONTROL).to_numpy(dtype=int)
    return att_from_table(dr_table.gamma, dr_table.day, acts, K)


@njit(cache=True)
def _curve(day_start, score_sorted, gamma_sorted, patient_sorted, counts, grid):
    """ATT at each treated fraction for patient multiplicities ``counts``."""
    n_days = day_start.size - 1
    out = np.zeros(grid.size)
    for g in range(grid.size):
        q = grid[g]
        total = 0.0
        n_used = 0
        for t in range(n_days):
            lo = day_start[t]
            hi = day_start[t + 1]
            n_t = 0
            for i in range(lo, hi):
                n_t += counts[patient_sorted[i]]
            if n_t == 0:
                continue
            k = int(np.floor(q * n_t + 0.5))
            if k < 1:
                k = 1
            if k > n_t:
                k = n_t
            remaining = k
            s = 0.0
            for i in range(lo, hi):
                c = counts[patient_sorted[i]]
                if c == 0:
                    continue
                take = c if c < remaining else remaining
                s += take * gamma_sorted[i]
                remaining -= take
                if remaining == 0:
                    break
            total += s / k
            n_used += 1
        out[g] = total / n_used if n_used > 0 else 0.0
    return out


@njit(cache=True)
def _weighted_means(gamma, patient, counts):
    k = gamma.shape[1]
    out = np.zeros(k)
    w = 0.0
    for i in range(gamma.shape[0]):
        c = counts[patient[i]]
        if c == 0:
            continue
        w += c
        for a in range(k):
            out[a] += c * gamma[i, a]
    if w > 0:
        out /= w
    return out


def _replicate_counts(n_patients: int, seed: int, b: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(b)]))
    return np.bincount(rng.integers(0, n_patients, n_patients), minlength=n_patients).astype(np.int64)


def bootstrap_ci(statistic, patient_ids, B: int = 1000, level: float = 0.95, seed: int = 0):
    """Percentile interval of ``statistic(rows)`` under patient resampling.

    ``patient_ids`` labels each row; each replicate draws patients with
    replacement and passes the concatenated row positions of the drawn
    patients (a patient drawn twice contributes its rows twice).
    Returns ``(low, high, replicates)``.
    """
    pid = np.asarray(patient_ids)
    uniq, inv = np.unique(pid, return_inverse=True)
    if uniq.size < 2:
        raise ValueError("need at least 2 distinct patients to bootstrap")
    if B < 1:
        raise ValueError("B must be positive")
    order = np.argsort(inv, kind="stable")
    sizes = np.bincount(inv, minlength=uniq.size)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    reps = np.empty(B)
    one_row = bool((sizes == 1).all())
    for b in range(B):
        counts = _replicate_counts(uniq.size, seed, b)
        drawn = np.repeat(np.arange(uniq.size), counts)
        if one_row:
            reps[b] = statistic(order[drawn])
            continue
        n_rows = sizes[drawn]
        # positions within each drawn patient's block, laid end to end
        offset = np.arange(n_rows.sum()) - np.repeat(np.cumsum(n_rows) - n_rows, n_rows)
        rows = order[np.repeat(starts[drawn], n_rows) + offset]
        reps[b] = statistic(rows)
    lo, hi = percentile_interval(reps, level)
    return lo, hi, reps


def percentile_interval(reps, level: float = 0.95) -> tuple[float, float]:
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.asarray(reps, dtype=float), [alpha, 1.0 - alpha])
    return float(lo), float(hi)


@dataclass
class TocReport:
    grid: np.ndarray
    att: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    ate: np.ndarray  # DR ATE per action
    baseline_action: int
    baseline: float
    baseline_ci: tuple[float, float]
    mix_ate: float  # value of treating everyone with their chosen action
    autoc: float
    autoc_ci: tuple[float, float]
    B: int
    level: float
    seed: int
    att25: float = float("nan")
    att25_ci: tuple[float, float] = (float("nan"), float("nan"))
    metadata: dict = field(default_factory=dict)
    replicates: np.ndarray | None = None  # (B, len(grid)) ATT replicates

    def at(self, q: float) -> tuple[float, float, float]:
        j = int(np.argmin(np.abs(self.grid - q)))
        if abs(self.grid[j] - q) > 1e-9:
            raise KeyError(f"{q} not on the grid")
        return float(self.att[j]), float(self.ci_low[j]), float(self.ci_high[j])

    def half_width(self, q: float = 0.25) -> float:
        _, lo, hi = self.at(q)
        return (hi - lo) / 2.0

    def summary(self, q: float = 0.25, scale: float = 100.0) -> str:
        """Point estimate with interval, e.g. ``6.6 [95% CI: 5.6-7.6]`` in TIR points."""
        v, lo, hi = self.at(q)
        return f"{scale * v:.1f} [{100 * self.level:.0f}% CI: {scale * lo:.1f}-{scale * hi:.1f}]"

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(), "att": self.att.tolist(),
            "ci_low": self.ci_low.tolist(), "ci_high": self.ci_high.tolist(),
            "ate": self.ate.tolist(), "baseline_action": self.baseline_action,
            "baseline": self.baseline, "baseline_ci": list(self.baseline_ci),
            "mix_ate": self.mix_ate, "autoc": self.autoc, "autoc_ci": list(self.autoc_ci),
            "att25": self.att25, "att25_ci": list(self.att25_ci),
            "B": self.B, "level": self.level, "seed": self.seed, "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TocReport":
        return cls(np.asarray(d["grid"]), np.asarray(d["att"]), np.asarray(d["ci_low"]),
                   np.asarray(d["ci_high"]), np.asarray(d["ate"]), d["baseline_action"],
                   d["baseline"], tuple(d["baseline_ci"]), d["mix_ate"], d["autoc"],
                   tuple(d["autoc_ci"]), d["B"], d["level"], d["seed"], d["att25"],
                   tuple(d["att25_ci"]), d.get("metadata", {}))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fraction": self.grid, "att": self.att, "ci_low": self.ci_low,
                             "ci_high": self.ci_high, "baseline": self.baseline,
                             "mix_ate": self.mix_ate})


def toc_curve(tau_hat, dr_table: DrScoreTable, grid=DEFAULT_GRID, B: int = 500, seed: int = 0,
              level: float = 0.95, keep_replicates: bool = False) -> TocReport:
    """ATT of the induced daily policy across treated fractions, with patient-bootstrap CIs.

    ``tau_hat`` is the (n, n_actions) estimated effect table on the DR
    table's rows.  The area statistic integrates ATT minus the value of
    treating everyone with their chosen action, by the trapezoid rule on the
    grid; for the comparison line the action with the largest mean
    estimated effect is used.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    if np.any(grid <= 0) or np.any(grid > 1):
        raise ValueError("grid values must lie in (0, 1]")
    if B < 1:
        raise ValueError("B must be positive")
    tau_hat = np.asarray(tau_hat, dtype=float)
    n = len(dr_table)
    if tau_hat.shape != dr_table.gamma.shape:
        raise ValueError("effect table and DR table differ in shape")
    a_star, score = best_actions(tau_hat)
    uniq, pidx = np.unique(dr_table.patient_id, return_inverse=True)
    order = np.lexsort((dr_table.patient_id, -score, dr_table.day))
    day_sorted = dr_table.day[order]
    starts = np.flatnonzero(np.r_[True, day_sorted[1:] != day_sorted[:-1]])
    day_start = np.r_[starts, n].astype(np.int64)
    g_pick = dr_table.gamma[np.arange(n), a_star]
    args = (day_start, score[order], g_pick[order], pidx[order].astype(np.int64))

    ones = np.ones(uniq.size, dtype=np.int64)
    att = _curve(*args, ones, grid)
    ate = dr_table.gamma.mean(axis=0)
    base_a = int(np.argmax(tau_hat[:, 1:].mean(axis=0)) + 1) if tau_hat.shape[1] > 1 else 0
    mix = float(_curve(*args, ones, np.array([1.0]))[0])
    autoc = float(np.trapezoid(att - mix, grid))

    reps = np.empty((B, grid.size))
    base_reps = np.empty(B)
    mix_reps = np.empty(B)
    gamma = np.ascontiguousarray(dr_table.gamma)
    pidx64 = pidx.astype(np.int64)
    for b in range(B):
        counts = _replicate_counts(uniq.size, seed, b)
        reps[b] = _curve(*args, counts, grid)
        mix_reps[b] = reps[b, -1] if grid[-1] == 1.0 else _curve(*args, counts, np.array([1.0]))[0]
        base_reps[b] = _weighted_means(gamma, pidx64, counts)[base_a]
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [alpha, 1 - alpha], axis=0)
    autoc_reps = np.trapezoid(reps - mix_reps[:, None], grid, axis=1)
    rep = TocReport(
        grid=grid, att=att, ci_low=lo, ci_high=hi, ate=ate, baseline_action=base_a,
        baseline=float(ate[base_a]), baseline_ci=percentile_interval(base_reps, level),
        mix_ate=mix, autoc=autoc, autoc_ci=percentile_interval(autoc_reps, level),
        B=B, level=level, seed=seed,
        replicates=reps if keep_replicates else None,
    )
    if np.any(np.isclose(grid, 0.25)):
        rep.att25 = rep.at(0.25)[0]
        rep.att25_ci = rep.at(0.25)[1:]
    return rep


def att_at_fraction(tau_hat, dr_table: DrScoreTable, fraction: float = 0.25) -> float:
    """Point ATT of the induced daily policy at one treated fraction."""
    pol = daily_policy(tau_hat, dr_table.patient_id, dr_table.day, fraction=fraction)
    caps = pol.groupby("day")["K"].first().to_dict()
    return estimate_att(pol, dr_table, caps)


__all__ = [
    "CONTROL_DEMOGRAPHICS", "DEFAULT_GRID", "HISTORY_WEEKS", "CapacityError", "ControlCovariates",
    "DrScoreTable", "LeakageError", "Nuisances", "OutcomeModel", "SplitIndex", "TocReport",
    "assert_disjoint", "att_at_fraction", "bootstrap_ci", "build_control_covariates",
    "capacity_for", "control_covariate_names", "dr_scores", "dr_scores_from_predictions",
    "estimate_att", "evaluation_rows", "fit_nuisances", "fit_outcome_model", "panel_dr_scores",
    "percentile_interval", "split_by_patient", "toc_curve",
]
