import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rpmpolicy.evaluation import (
    CONTROL_DEMOGRAPHICS, DrScoreTable, LeakageError, SplitIndex, TocReport, assert_disjoint,
    bootstrap_ci, build_control_covariates, dr_scores, dr_scores_from_predictions, estimate_att,
    evaluation_rows, split_by_patient, toc_curve,
)
from rpmpolicy.policy import best_actions, daily_policy, day_capacities
from rpmpolicy.representations import TIDE_FEATURES
from rpmpolicy.simulate import CapacityError, att_from_table, oracle_att

N_ACTIONS = 5


@pytest.fixture(scope="module")
def oracle_dr(panel_30k):
    """DR table from the true outcome means and the true logging propensities."""
    r = panel_30k.rows
    eff = panel_30k.true_effects()
    r_hat = panel_30k.oracle["control_response"].to_numpy()[:, None] + eff
    return dr_scores_from_predictions(r_hat, panel_30k.true_propensities(), r["action_class"].to_numpy(),
                                      r["reward"].to_numpy(), r["patient_id"].to_numpy(),
                                      r["day"].to_numpy(), clip_floor=0.01)


# --------------------------------------------------------------------------
# Splits


@pytest.mark.exactness
def test_split_of_281_patients():
    s = split_by_patient(np.arange(281), seed=0)
    assert sorted(len(s.part(p)) for p in ("train", "validation", "test")) == [93, 94, 94]
    assert set(s.train) | set(s.validation) | set(s.test) == set(range(281))


@pytest.mark.exactness
def test_split_of_three_patients():
    s = split_by_patient([7, 8, 9], seed=1)
    assert [len(s.train), len(s.validation), len(s.test)] == [1, 1, 1]


@pytest.mark.exactness
def test_split_is_deterministic():
    assert split_by_patient(np.arange(50), 5) == split_by_patient(np.arange(50), 5)
    assert split_by_patient(np.arange(50), 5) != split_by_patient(np.arange(50), 6)


def test_split_needs_three_patients():
    with pytest.raises(ValueError):
        split_by_patient([1, 2], 0)


def test_split_roundtrip_and_overlap_check():
    s = split_by_patient(np.arange(10), 2)
    assert SplitIndex.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        SplitIndex((1, 2), (2,), (3,))


def test_leakage_detected():
    with pytest.raises(LeakageError):
        assert_disjoint([1, 2, 3], [3, 4])
    assert_disjoint([1, 2], [3, 4])
    table = np.zeros((4, 2))
    with pytest.raises(LeakageError):
        dr_scores(np.zeros((4, 1)), np.zeros(4, int), np.zeros(4), table, np.full((4, 2), 0.5),
                  patient_id=np.array([1, 1, 2, 2]), train_patients=[2])


# --------------------------------------------------------------------------
# Control covariates


@pytest.mark.exactness
def test_two_week_covariates_are_tide_plus_demographics(small_panel):
    cov = build_control_covariates(small_panel, 2)
    assert cov.names == tuple(TIDE_FEATURES) + CONTROL_DEMOGRAPHICS
    assert cov.matrix.shape == (cov.rows.size, len(cov.names))


@pytest.mark.exactness
def test_four_week_covariates_add_message_history(small_panel):
    cov = build_control_covariates(small_panel, 4)
    for w in (1, 2, 3, 4):
        assert f"msg_week{w}" in cov.names
    r = small_panel.rows
    sent = r[r["action_class"] != 0]
    col = {n: j for j, n in enumerate(cov.names)}
    for pos, row in zip(cov.rows[::7], cov.matrix[::7]):
        pid, day = r["patient_id"].iat[pos], r["day"].iat[pos]
        mine = sent.loc[sent["patient_id"] == pid, "day"].to_numpy()
        for w in (1, 2, 3, 4):
            expect = bool(((mine >= day - 7 * w) & (mine < day - 7 * (w - 1))).any())
            assert row[col[f"msg_week{w}"]] == expect


@pytest.mark.exactness
def test_rows_without_history_are_dropped(small_panel):
    day = small_panel.rows["day"].to_numpy()
    for h in (2, 4):
        cov = build_control_covariates(small_panel, h)
        assert day[cov.rows].min() >= 7 * h
        assert cov.dropped == int((day < 7 * h).sum())
    cov = build_control_covariates(small_panel, 2, min_day=30)
    assert day[cov.rows].min() >= 30 and cov.dropped == int((day < 30).sum())


def test_history_weeks_bounds(small_panel):
    with pytest.raises(ValueError):
        build_control_covariates(small_panel, 5)


def test_evaluation_rows_use_weekly_days(small_panel):
    rows = evaluation_rows(small_panel)
    assert (small_panel.rows["day"].to_numpy()[rows] % 7 == 0).all()
    assert evaluation_rows(small_panel, 1).size == len(small_panel)


# --------------------------------------------------------------------------
# Doubly robust scores


@pytest.mark.exactness
def test_oracle_nuisances_recover_ate(panel_30k, oracle_dr):
    truth = panel_30k.true_effects().mean(axis=0)
    np.testing.assert_allclose(oracle_dr.ate(), truth, atol=0.005)


@pytest.mark.exactness
def test_control_score_is_zero():
    g = dr_scores_from_predictions(np.array([[0.3, 0.5]]), np.array([[0.4, 0.6]]), [0], [0.9]).gamma
    assert g[0, 0] == 0.0


@pytest.mark.exactness
def test_hand_built_row():
    r_hat = np.array([[0.05, 0.1, 0.0, 0.0]])
    e_hat = np.array([[0.25, 0.25, 0.25, 0.25]])
    g = dr_scores_from_predictions(r_hat, e_hat, [1], [0.2]).gamma
    assert g[0, 1] == pytest.approx(0.45, abs=1e-15)


@given(arrays(np.float64, (6, 3), elements=st.floats(-1, 1)),
       arrays(np.float64, (6, 3), elements=st.floats(0.05, 1)),
       arrays(np.int64, 6, elements=st.integers(0, 2)))
def test_exact_outcome_model_ignores_propensities(r_hat, raw_e, actions):
    # when the outcome model reproduces the logged reward, residual terms vanish
    e = raw_e / raw_e.sum(axis=1, keepdims=True)
    rewards = r_hat[np.arange(6), actions]
    g = dr_scores_from_predictions(r_hat, e, actions, rewards).gamma
    np.testing.assert_allclose(g, r_hat - r_hat[:, [0]], atol=1e-12)


def test_propensity_below_floor_is_flagged():
    with pytest.raises(AssertionError):
        dr_scores_from_predictions(np.zeros((1, 2)), np.array([[0.995, 0.005]]), [0], [0.0], clip_floor=0.01)


def test_score_table_helpers():
    t = DrScoreTable(np.array([1, 2]), np.array([0, 0]), np.array([0, 1]), np.array([0.1, 0.2]),
                     np.array([[0.0, 1.0], [0.0, 3.0]]))
    np.testing.assert_array_equal(t.ate(), [0.0, 2.0])
    assert len(t.subset([1])) == 1
    assert list(t.to_frame().columns) == ["patient_id", "day", "action", "reward", "gamma_0", "gamma_1"]


# --------------------------------------------------------------------------
# Policy value


@pytest.mark.exactness
def test_all_control_policy_is_worth_zero(oracle_dr):
    asg = pd.DataFrame({"patient_id": oracle_dr.patient_id, "day": oracle_dr.day, "action_class": 0})
    assert estimate_att(asg, oracle_dr, 5) == 0.0


@pytest.mark.exactness
def test_oracle_policy_value_matches_truth(panel_30k, oracle_dr):
    asg = daily_policy(panel_30k.true_effects(), oracle_dr.patient_id, oracle_dr.day, fraction=0.25)
    K = day_capacities(asg)
    assert abs(estimate_att(asg, oracle_dr, K) - oracle_att(panel_30k, asg, K)) <= 0.01


def test_att_is_linear_in_scores(oracle_dr):
    asg = daily_policy(oracle_dr.gamma, oracle_dr.patient_id, oracle_dr.day, fraction=0.25)
    K = day_capacities(asg)
    a = estimate_att(asg, oracle_dr, K)
    assert estimate_att(asg, oracle_dr.scaled(3.0), K) == pytest.approx(3.0 * a, rel=1e-12)


def test_att_capacity_violation():
    t = DrScoreTable(np.array([1, 2]), np.array([0, 0]), np.array([0, 0]), np.zeros(2),
                     np.array([[0.0, 1.0], [0.0, 3.0]]))
    asg = pd.DataFrame({"patient_id": [1, 2], "day": [0, 0], "action_class": [1, 1]})
    with pytest.raises(CapacityError):
        estimate_att(asg, t, 1)


# --------------------------------------------------------------------------
# TOC


@pytest.mark.exactness
def test_constant_estimates_give_flat_curve(oracle_dr):
    tau = np.tile([0.0, 0.01, 0.02, 0.03, 0.04], (len(oracle_dr), 1))
    rep = toc_curve(tau, oracle_dr, B=200, seed=0)
    assert rep.baseline_action == 4
    hw = (rep.autoc_ci[1] - rep.autoc_ci[0]) / 2
    assert abs(rep.autoc) <= hw
    for q in rep.grid:
        v, lo, hi = rep.at(q)
        assert abs(v - rep.ate[4]) <= (hi - lo) / 2


@pytest.mark.exactness
def test_oracle_curve_is_non_increasing(panel_30k, oracle_dr):
    rep = toc_curve(panel_30k.true_effects(), oracle_dr, B=200, seed=1)
    half = (rep.ci_high - rep.ci_low) / 2
    assert np.all(np.diff(rep.att) <= half[1:])
    assert rep.att[0] > rep.att[-1]


@pytest.mark.exactness
def test_full_capacity_point_is_argmax_value(oracle_dr):
    tau = oracle_dr.gamma + 0.01
    rep = toc_curve(tau, oracle_dr, B=10, seed=0)
    a_star, _ = best_actions(tau)
    day = oracle_dr.day
    caps = {d: int((day == d).sum()) for d in np.unique(day)}
    expect = att_from_table(oracle_dr.gamma, day, a_star, caps)
    assert rep.at(1.0)[0] == pytest.approx(expect, abs=1e-12)
    assert rep.mix_ate == pytest.approx(expect, abs=1e-12)


@pytest.mark.exactness
def test_summary_format():
    rep = TocReport(np.array([0.25]), np.array([0.066]), np.array([0.056]), np.array([0.076]),
                    np.zeros(2), 1, 0.0, (0.0, 0.0), 0.0, 0.0, (0.0, 0.0), 10, 0.95, 0)
    assert rep.summary() == "6.6 [95% CI: 5.6-7.6]"


def test_report_roundtrip(tmp_path, oracle_dr):
    sub = oracle_dr.subset(np.arange(2000))
    rep = toc_curve(sub.gamma, sub, B=5, seed=0)
    rep.to_json(tmp_path / "toc.json")
    back = TocReport.from_dict(json.loads((tmp_path / "toc.json").read_text()))
    np.testing.assert_array_equal(back.att, rep.att)
    assert back.summary() == rep.summary()


def test_toc_input_checks(oracle_dr):
    with pytest.raises(ValueError):
        toc_curve(np.zeros((3, 5)), oracle_dr)
    with pytest.raises(ValueError):
        toc_curve(oracle_dr.gamma, oracle_dr, grid=[0.0, 0.5])


# --------------------------------------------------------------------------
# Bootstrap


@pytest.mark.exactness
def test_constant_statistic_interval():
    lo, hi, _ = bootstrap_ci(lambda rows: 5.0, np.arange(30), B=100)
    assert (lo, hi) == (5.0, 5.0)


@pytest.mark.exactness
def test_interval_coverage():
    covered = 0
    for rep in range(200):
        x = np.random.default_rng(rep).standard_normal(400)
        lo, hi, _ = bootstrap_ci(lambda rows: x[rows].mean(), np.arange(400), B=1000, seed=rep)
        covered += lo <= 0.0 <= hi
    assert 0.92 <= covered / 200 <= 0.98


@pytest.mark.exactness
def test_bootstrap_is_deterministic():
    x = np.random.default_rng(0).standard_normal(60)
    a = bootstrap_ci(lambda rows: x[rows].mean(), np.arange(60), B=50, seed=3)
    b = bootstrap_ci(lambda rows: x[rows].mean(), np.arange(60), B=50, seed=3)
    assert a[:2] == b[:2]
    np.testing.assert_array_equal(a[2], b[2])


def test_bootstrap_resamples_whole_patients():
    pid = np.repeat([10, 20, 30, 40], [3, 1, 2, 4])
    seen = []
    bootstrap_ci(lambda rows: seen.append(np.sort(rows)) or 0.0, pid, B=30, seed=0)
    for rows in seen:
        counts = np.bincount(rows, minlength=pid.size)
        for p in np.unique(pid):
            mine = counts[pid == p]
            assert (mine == mine[0]).all()  # all of a patient's rows, equally often
        assert rows.size == sum(np.bincount(rows, minlength=pid.size)[pid == p][0] * (pid == p).sum()
                                for p in np.unique(pid))


def test_bootstrap_needs_two_patients():
    with pytest.raises(ValueError):
        bootstrap_ci(lambda r: 0.0, [1, 1, 1], B=5)
