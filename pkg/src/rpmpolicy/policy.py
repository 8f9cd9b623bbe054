"""Capacity-constrained targeting policies induced by effect estimates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .simulate import CONTROL, CapacityError, LoggedPanel, oracle_att


@dataclass(frozen=True)
class Assignment:
    """One decision epoch: per-patient action, best score and rank (0 = first)."""

    patient_id: np.ndarray
    action: np.ndarray
    score: np.ndarray
    rank: np.ndarray
    K: int

    @property
    def treated(self) -> np.ndarray:
        return self.patient_id[self.action != CONTROL]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"patient_id": self.patient_id, "action_class": self.action,
                             "score": self.score, "rank": self.rank})


def _scores(cate, states) -> np.ndarray:
    if hasattr(cate, "predict"):
        tau = np.asarray(cate.predict(states), dtype=float)
    else:
        tau = np.asarray(cate, dtype=float)
    if tau.ndim != 2:
        raise ValueError("effect table must be (patients, actions)")
    return tau


def best_actions(tau: np.ndarray, include_control: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-row argmax action (ties -> lowest id) and its value.

    With ``include_control`` the control column (identically 0) competes, so
    a patient whose every message has a negative effect gets control.
    """
    lo = 0 if include_control else 1
    sub = tau[:, lo:]
    a = np.argmax(sub, axis=1)
    return a + lo, sub[np.arange(sub.shape[0]), a]


def induce_policy(cate, states, K: int, patient_ids=None,
                  skip_negative_scores: bool = False, include_control: bool = True) -> Assignment:
    """Treat the K patients with the largest best-action effect estimate.

    ``cate`` is a fitted model with ``predict(states) -> (n, n_actions)`` or
    an already evaluated (n, n_actions) effect table.  Each patient's best
    action is the argmax over all actions, control included, so best scores
    are never negative.  Rank ties go to the lower patient id.  With
    ``include_control=False`` the argmax runs over messages only, and
    ``skip_negative_scores`` then keeps selected patients with a negative
    best estimate on control.
    """
    tau = _scores(cate, states)
    n = tau.shape[0]
    pids = np.arange(n) if patient_ids is None else np.asarray(patient_ids)
    if len(pids) != n:
        raise ValueError("patient_ids length does not match the effect table")
    if not 0 <= K <= n:
        raise CapacityError(f"K={K} outside [0, {n}]")
    if tau.shape[1] < 2:
        return Assignment(pids, np.zeros(n, dtype=int), np.zeros(n), np.arange(n), K)
    a_star, score = best_actions(tau, include_control)
    order = np.lexsort((pids, -score))
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)
    chosen = rank < K
    if skip_negative_scores:
        chosen &= score >= 0
    action = np.where(chosen, a_star, CONTROL)
    return Assignment(pids, action, score, rank, K)


def optimal_policy(oracle, K: int, states=None, patient_ids=None) -> Assignment:
    """Policy induced by the true effects.

    ``oracle`` is a true effect table (n, n_actions), or an OracleCate
    applied to ``states`` (a feature frame or mapping of columns).
    """
    if hasattr(oracle, "effects"):
        tau = oracle.effects(states)
    else:
        tau = oracle
    return induce_policy(np.asarray(tau, dtype=float), None, K, patient_ids)


def capacity_for(n: int, fraction: float) -> int:
    """Per-day capacity for a treated fraction: nearest integer, at least one when n > 0."""
    if n == 0:
        return 0
    return int(min(n, max(1, int(np.floor(fraction * n + 0.5)))))


def daily_policy(tau: np.ndarray, patient_ids, days, fraction: float | None = None,
                 K: int | dict | None = None, skip_negative_scores: bool = False,
                 include_control: bool = True) -> pd.DataFrame:
    """Apply the induced policy separately on each decision day.

    Capacity is either an explicit ``K`` (int or day -> int) or a treated
    ``fraction`` of that day's patients.  Returns one row per input row with
    columns patient_id, day, action_class, score, rank, K, in input order.
    """
    tau = np.asarray(tau, dtype=float)
    pids = np.asarray(patient_ids)
    days = np.asarray(days)
    out_action = np.zeros(tau.shape[0], dtype=int)
    out_score = np.zeros(tau.shape[0])
    out_rank = np.zeros(tau.shape[0], dtype=int)
    out_k = np.zeros(tau.shape[0], dtype=int)
    uniq, inv = np.unique(days, return_inverse=True)
    groups = np.split(np.argsort(inv, kind="stable"), np.cumsum(np.bincount(inv))[:-1])
    for d, rows in zip(uniq, groups):
        if K is None:
            k = capacity_for(rows.size, fraction)
        else:
            k = K[d] if isinstance(K, dict) else int(K)
        asg = induce_policy(tau[rows], None, min(k, rows.size), pids[rows],
                            skip_negative_scores, include_control)
        out_action[rows] = asg.action
        out_score[rows] = asg.score
        out_rank[rows] = asg.rank
        out_k[rows] = k
    return pd.DataFrame({"patient_id": pids, "day": days, "action_class": out_action,
                         "score": out_score, "rank": out_rank, "K": out_k})


def day_capacities(assignments: pd.DataFrame) -> dict:
    return assignments.groupby("day")["K"].first().to_dict()


def policy_regret(panel: LoggedPanel, cate, K=None, fraction: float | None = 0.25,
                  states=None) -> float:
    """ATT of the oracle-optimal daily policy minus ATT of the induced one."""
    effects = panel.true_effects()
    pids = panel.rows["patient_id"].to_numpy()
    days = panel.rows["day"].to_numpy()
    tau_hat = _scores(cate, states)
    kw = dict(K=K) if K is not None else dict(fraction=fraction)
    opt = daily_policy(effects, pids, days, **kw)
    ind = daily_policy(tau_hat, pids, days, **kw)
    caps = day_capacities(opt)
    return oracle_att(panel, opt, caps) - oracle_att(panel, ind, caps)
