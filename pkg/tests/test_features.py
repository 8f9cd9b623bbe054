import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rpmpolicy.features import (
    DEMOGRAPHIC_NAMES, FEATURE_NAMES, SLOTS_PER_DAY, WINDOW_SLOTS, Demographics,
    InconsistentInputError, UndefinedFeatureError, compute_window_features, glycemia_risk_index,
    risk_flags, window_feature_table,
)
from rpmpolicy.simulate import sample_cohort, simulate_panel

DEMO = Demographics(sexF=1, public_insurance=0, english_primary_language=1, pop_pilot=0, pop_4T_1=1,
                    pop_4T_2=0, pop_TIPS=0, age=12.5, months_since_onset=3.0, using_pump=1,
                    using_aid=0, days_since_msg=75.0)


def _constant(v, days=14):
    return np.full(days * SLOTS_PER_DAY, float(v))


# --------------------------------------------------------------------------
# Worked examples


@pytest.mark.exactness
def test_constant_in_range_trace():
    f = compute_window_features(_constant(120), DEMO, 14)
    assert f.in_range_7dr == 1.0 and f.low_7dr == 0.0 and f.high_7dr == 0.0
    assert f.g_7dr == 120.0
    assert f.time_worn_7dr == 1.0
    assert f.gri_7dr == 0.0
    assert f.days_since_msg == 60.0  # capped


@pytest.mark.exactness
def test_two_point_trace():
    x = np.tile([60.0, 200.0], 7 * SLOTS_PER_DAY)
    f = compute_window_features(x, DEMO, 14)
    assert f.low_7dr == 0.5 and f.high_7dr == 0.5 and f.in_range_7dr == 0.0


def _hand_features(trace, day):
    """Brute-force pass over the raw slots with plain Python arithmetic."""
    start = (day - 14) * SLOTS_PER_DAY

    def tally(slots):
        n = vl = lo = hi = vh = 0
        total = 0.0
        for s in slots:
            v = float(trace[s])
            if math.isnan(v):
                continue
            n += 1
            total += v
            vl += v < 54
            lo += v < 70
            hi += v > 180
            vh += v > 250
        return n, total, vl, lo, hi, vh

    recent = range(start + 7 * SLOTS_PER_DAY, start + 14 * SLOTS_PER_DAY)
    prior = range(start, start + 7 * SLOTS_PER_DAY)
    night = [s for s in recent if (s % SLOTS_PER_DAY) >= 276 or (s % SLOTS_PER_DAY) < 60]
    daytime = [s for s in recent if 72 <= (s % SLOTS_PER_DAY) < 264]
    n, tot, vl, lo, hi, vh = tally(recent)
    pn, _, pvl, plo, phi, pvh = tally(prior)
    nn, _, nvl, nlo, nhi, nvh = tally(night)
    dn, _, dvl, dlo, dhi, dvh = tally(daytime)

    def gri(vl, lo, hi, vh, n):
        raw = 3.0 * 100 * vl / n + 2.4 * 100 * (lo - vl) / n + 1.6 * 100 * vh / n + 0.8 * 100 * (hi - vh) / n
        return min(100.0, max(0.0, raw))

    return {
        "g_7dr": tot / n, "very_low_7dr": vl / n, "low_7dr": lo / n, "high_7dr": hi / n,
        "very_high_7dr": vh / n, "in_range_7dr": (n - lo - hi) / n,
        "gri_7dr": gri(vl, lo, hi, vh, n),
        "in_range_7dr_7d_delta": (n - lo - hi) / n - (pn - plo - phi) / pn,
        "low_7dr_7d_delta": lo / n - plo / pn,
        "gri_7dr_7d_delta": gri(vl, lo, hi, vh, n) - gri(pvl, plo, phi, pvh, pn),
        "low_14dr": (lo + plo) / (n + pn), "in_range_14dr": (n + pn - lo - plo - hi - phi) / (n + pn),
        "night_low_7dr": nlo / nn, "night_high_7dr": nhi / nn,
        "day_very_high_7dr": dvh / dn, "day_low_7dr": dlo / dn,
        "time_worn_7dr": n / (7 * 288), "night_worn_7dr": nn / (7 * 72), "day_worn_7dr": dn / (7 * 192),
    }


@pytest.mark.exactness
def test_simulated_trace_matches_slot_by_slot_computation():
    panel = simulate_panel(sample_cohort(1, 3), 40, 1.0, seed=3)
    trace = panel.traces[0]
    f = compute_window_features(trace, DEMO, 20)
    hand = _hand_features(trace, 20)
    for name, value in hand.items():
        assert f[name] == pytest.approx(value, abs=1e-12), name
    # the vectorised panel path agrees with the scalar path
    row = panel.rows[panel.rows["day"] == 20]
    if len(row):
        for name in hand:
            assert row[name].iat[0] == pytest.approx(f[name], abs=1e-12), name


@pytest.mark.exactness
def test_gri_examples():
    assert glycemia_risk_index(0, 0, 0, 0) == 0.0
    assert glycemia_risk_index(0.01, 0.04, 0.30, 0.10) == pytest.approx(42.2, abs=1e-9)
    assert glycemia_risk_index(0.5, 0.5, 0.5, 0.5) == 100.0


@pytest.mark.exactness
def test_gri_rejects_inconsistent_bands():
    with pytest.raises(InconsistentInputError):
        glycemia_risk_index(0.05, 0.01, 0.2, 0.1)
    with pytest.raises(InconsistentInputError):
        glycemia_risk_index(0.0, 0.01, 0.1, 0.2)


@pytest.mark.exactness
def test_risk_flag_thresholds():
    base = {"in_range_7dr_7d_delta": 0.0, "in_range_7dr": 0.8, "low_7dr": 0.0, "very_low_7dr": 0.0}
    assert risk_flags({**base, "in_range_7dr_7d_delta": -0.16})[0] is True
    assert risk_flags({**base, "in_range_7dr_7d_delta": -0.15})[0] is False
    assert risk_flags({**base, "in_range_7dr": 0.65})[1] is False
    assert risk_flags({**base, "in_range_7dr": 0.649})[1] is True
    zeros = {k: 0.0 for k in base}
    assert risk_flags(zeros) == (False, True, False, False)


@pytest.mark.exactness
def test_all_missing_window_is_undefined():
    x = _constant(120)
    x[7 * SLOTS_PER_DAY:] = np.nan
    with pytest.raises(UndefinedFeatureError):
        compute_window_features(x, DEMO, 14)


def test_short_trace_rejected():
    with pytest.raises(ValueError):
        compute_window_features(_constant(120, days=10), DEMO, 14)


# --------------------------------------------------------------------------
# Properties

glucose = st.floats(40, 400, allow_nan=False)


def _window(draw_values, missing):
    x = np.asarray(draw_values, dtype=float)
    x[missing] = np.nan
    return x


windows = st.builds(
    _window,
    arrays(np.float64, WINDOW_SLOTS, elements=glucose),
    arrays(np.bool_, WINDOW_SLOTS, elements=st.booleans()),
)


def _valid(x):
    half = WINDOW_SLOTS // 2
    return (~np.isnan(x[:half])).any() and (~np.isnan(x[half:])).any()


@given(windows)
def test_fractions_partition_present_readings(x):
    if not _valid(x):
        return
    f = compute_window_features(x, DEMO, 14)
    for name in FEATURE_NAMES:
        if name.endswith(("_7dr", "_14dr")) and not name.startswith(("g_", "gri_")):
            assert 0.0 <= f[name] <= 1.0, name
    assert abs(f.low_7dr + f.in_range_7dr + f.high_7dr - 1.0) < 1e-9
    assert abs(f.low_14dr + f.in_range_14dr + f.high_14dr - 1.0) < 1e-9


@given(windows)
def test_fourteen_day_fractions_are_wear_weighted(x):
    if not _valid(x):
        return
    half = WINDOW_SLOTS // 2
    f = compute_window_features(x, DEMO, 14)
    n_old = (~np.isnan(x[:half])).sum()
    n_new = (~np.isnan(x[half:])).sum()
    # the older week's fractions are recovered from the delta fields
    old_low = f.low_7dr - f.low_7dr_7d_delta
    old_in = f.in_range_7dr - f.in_range_7dr_7d_delta
    w = n_new / (n_new + n_old)
    assert abs(f.low_14dr - (w * f.low_7dr + (1 - w) * old_low)) < 1e-9
    assert abs(f.in_range_14dr - (w * f.in_range_7dr + (1 - w) * old_in)) < 1e-9


@given(windows)
def test_delta_fields_are_exact_differences(x):
    if not _valid(x):
        return
    f = compute_window_features(x, DEMO, 14)
    prior = x[:WINDOW_SLOTS // 2]
    p = prior[~np.isnan(prior)]
    n, lo, hi = p.size, np.count_nonzero(p < 70), np.count_nonzero(p > 180)
    assert f.in_range_7dr_7d_delta == f.in_range_7dr - (n - lo - hi) / n
    assert f.low_7dr_7d_delta == f.low_7dr - lo / n
    doubled = np.concatenate([prior, prior])
    g = compute_window_features(doubled, DEMO, 14)
    assert g.in_range_7dr_7d_delta == 0.0 and g.gri_7dr_7d_delta == 0.0


@given(arrays(np.float64, WINDOW_SLOTS, elements=st.floats(71, 179)), st.floats(-0.9, 0.9))
def test_in_range_shift_leaves_fractions_unchanged(x, shift):
    x = np.round(x)
    y = x + shift
    fx = compute_window_features(x, DEMO, 14)
    fy = compute_window_features(y, DEMO, 14)
    for name in FEATURE_NAMES:
        if name.endswith(("_7dr", "_14dr", "_delta")) and not name.startswith(("g_", "gri")):
            assert fx[name] == fy[name], name


@given(arrays(np.float64, WINDOW_SLOTS, elements=glucose))
def test_complete_window_is_fully_worn(x):
    f = compute_window_features(x, DEMO, 14)
    assert f.time_worn_7dr == 1.0 and f.night_worn_7dr == 1.0 and f.day_worn_7dr == 1.0


def test_vectorised_table_matches_scalar_path(small_panel):
    pid = 3
    trace = small_panel.traces[pid].astype(float)
    rows = small_panel.rows[small_panel.rows["patient_id"] == pid].head(5)
    demo = {k: rows[k].to_numpy() for k in DEMOGRAPHIC_NAMES}
    table = window_feature_table(trace, rows["day"].to_numpy(), demo)
    assert list(table.columns) == list(FEATURE_NAMES)
    for j, day in enumerate(rows["day"]):
        f = compute_window_features(trace, {k: v[j] for k, v in demo.items()}, int(day))
        for name in FEATURE_NAMES:
            assert table[name].iat[j] == pytest.approx(f[name], abs=1e-12), name


def test_night_and_day_gaps_are_unassigned():
    x = _constant(120)
    day = np.arange(WINDOW_SLOTS) % SLOTS_PER_DAY
    gap = ((day >= 60) & (day < 72)) | ((day >= 264) & (day < 276))
    x[gap] = 300.0
    f = compute_window_features(x, DEMO, 14)
    assert f.high_7dr > 0
    assert f.night_high_7dr == 0.0 and f.day_high_7dr == 0.0


def test_feature_frame_columns_documented():
    cols = pd.Index(FEATURE_NAMES)
    assert cols.is_unique
    assert cols[0] == "g_7dr" and cols[-1] == "very_lows"
