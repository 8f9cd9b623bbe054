"""Clinical CGM feature battery computed from a two-week window of readings.

Readings arrive at a 5-minute cadence (288 slots per day) with missing
values stored as NaN.  A decision on day ``t`` sees the 14 days ``t-14 ..
t-1``; "7dr" features use the most recent 7 of those days and the
``*_7d_delta`` features compare them with the 7 days before.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np
import pandas as pd

SLOTS_PER_DAY = 288
WINDOW_DAYS = 14
WINDOW_SLOTS = WINDOW_DAYS * SLOTS_PER_DAY

VERY_LOW_MGDL = 54.0
LOW_MGDL = 70.0
HIGH_MGDL = 180.0
VERY_HIGH_MGDL = 250.0

# 23:00-05:00 and 06:00-22:00; 05:00-06:00 and 22:00-23:00 belong to neither.
_slot = np.arange(SLOTS_PER_DAY)
NIGHT_SLOTS = (_slot >= 23 * 12) | (_slot < 5 * 12)
DAY_SLOTS = (_slot >= 6 * 12) & (_slot < 22 * 12)
del _slot

LARGE_TIR_DROP_THRESHOLD = -0.15
LOW_TIR_THRESHOLD = 0.65
LOWS_THRESHOLD = 0.04
VERY_LOWS_THRESHOLD = 0.01
DAYS_SINCE_MSG_CAP = 60


class UndefinedFeatureError(ValueError):
    """A required window has no present readings."""


class InconsistentInputError(ValueError):
    """Nested range fractions contradict each other."""


@dataclass(frozen=True)
class Demographics:
    sexF: int
    public_insurance: int
    english_primary_language: int
    pop_pilot: int
    pop_4T_1: int
    pop_4T_2: int
    pop_TIPS: int
    age: float
    months_since_onset: float
    using_pump: int
    using_aid: int
    days_since_msg: float


@dataclass(frozen=True)
class ClinicalFeatures:
    """Feature vector for one patient-day; field order is the CSV column order."""

    g_7dr: float
    very_low_7dr: float
    low_7dr: float
    in_range_7dr: float
    high_7dr: float
    very_high_7dr: float
    gri_7dr: float
    g_14dr: float
    very_low_14dr: float
    low_14dr: float
    in_range_14dr: float
    high_14dr: float
    very_high_14dr: float
    gri_14dr: float
    night_very_low_7dr: float
    night_low_7dr: float
    night_high_7dr: float
    night_very_high_7dr: float
    day_very_low_7dr: float
    day_low_7dr: float
    day_high_7dr: float
    day_very_high_7dr: float
    time_worn_7dr: float
    night_worn_7dr: float
    day_worn_7dr: float
    gri_7dr_7d_delta: float
    very_low_7dr_7d_delta: float
    low_7dr_7d_delta: float
    in_range_7dr_7d_delta: float
    very_high_7dr_7d_delta: float
    night_very_low_7dr_7d_delta: float
    night_low_7dr_7d_delta: float
    night_high_7dr_7d_delta: float
    sexF: int
    public_insurance: int
    english_primary_language: int
    pop_pilot: int
    pop_4T_1: int
    pop_4T_2: int
    pop_TIPS: int
    age: float
    months_since_onset: float
    using_pump: int
    using_aid: int
    days_since_msg: float
    large_tir_drop: int
    low_tir: int
    lows: int
    very_lows: int

    def __getitem__(self, name: str):
        return getattr(self, name)

    def as_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ClinicalFeatures":
        values = self.as_dict()
        values.update(changes)
        return ClinicalFeatures(**values)


FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in fields(ClinicalFeatures))
DEMOGRAPHIC_NAMES: tuple[str, ...] = tuple(f.name for f in fields(Demographics))
FLAG_NAMES = ("large_tir_drop", "low_tir", "lows", "very_lows")
CGM_FEATURE_NAMES = tuple(
    n for n in FEATURE_NAMES if n not in DEMOGRAPHIC_NAMES and n not in FLAG_NAMES
)


def glycemia_risk_index(very_low, low, high, very_high):
    """Glycemia Risk Index from range fractions, clipped to [0, 100].

    ``low`` includes ``very_low`` and ``high`` includes ``very_high``; the
    weights apply to percent of readings in each exclusive band.  Accepts
    scalars or equal-shape arrays.
    """
    vl, lo, hi, vh = (np.asarray(v, dtype=float) for v in (very_low, low, high, very_high))
    tol = 1e-12
    if np.any(lo < vl - tol) or np.any(hi < vh - tol):
        raise InconsistentInputError("low < very_low or high < very_high")
    gri = _gri(vl, lo, hi, vh)
    return float(gri) if gri.ndim == 0 else gri


def _gri(vl, lo, hi, vh):
    raw = (
        3.0 * (100.0 * vl)
        + 2.4 * (100.0 * (lo - vl))
        + 1.6 * (100.0 * vh)
        + 0.8 * (100.0 * (hi - vh))
    )
    return np.clip(raw, 0.0, 100.0)


def risk_flags(features: Mapping) -> tuple[bool, bool, bool, bool]:
    """Clinician risk flags: (large_tir_drop, low_tir, lows, very_lows)."""
    return (
        bool(features["in_range_7dr_7d_delta"] < LARGE_TIR_DROP_THRESHOLD),
        bool(features["in_range_7dr"] < LOW_TIR_THRESHOLD),
        bool(features["low_7dr"] > LOWS_THRESHOLD),
        bool(features["very_low_7dr"] > VERY_LOWS_THRESHOLD),
    )


def _band_fractions(values: np.ndarray) -> dict:
    present = values[~np.isnan(values)]
    n = present.size
    if n == 0:
        return {"n": 0, "mean": np.nan, "very_low": 0.0, "low": 0.0,
                "in_range": 0.0, "high": 0.0, "very_high": 0.0}
    n_low = np.count_nonzero(present < LOW_MGDL)
    n_high = np.count_nonzero(present > HIGH_MGDL)
    return {
        "n": n,
        "mean": float(present.mean()),
        "very_low": np.count_nonzero(present < VERY_LOW_MGDL) / n,
        "low": n_low / n,
        "in_range": (n - n_low - n_high) / n,
        "high": n_high / n,
        "very_high": np.count_nonzero(present > VERY_HIGH_MGDL) / n,
    }


def compute_window_features(trace, demographics: Demographics | Mapping,
                            day_index: int) -> ClinicalFeatures:
    """Features for decision day ``day_index`` from a full patient trace.

    ``trace`` holds readings from day 0 onward (NaN = missing) and must
    cover the 14 days before ``day_index``.  Range fractions use present
    readings only; wear fractions use all slots.  A night or day sub-window
    with no readings contributes fractions of 0.
    """
    readings = np.asarray(getattr(trace, "readings", trace), dtype=float)
    if day_index < WINDOW_DAYS or readings.size < day_index * SLOTS_PER_DAY:
        raise ValueError("trace does not cover 14 days before day_index")
    window = readings[(day_index - WINDOW_DAYS) * SLOTS_PER_DAY: day_index * SLOTS_PER_DAY]
    prior = window[: WINDOW_SLOTS // 2].reshape(7, SLOTS_PER_DAY)
    recent = window[WINDOW_SLOTS // 2:].reshape(7, SLOTS_PER_DAY)

    cur = _band_fractions(recent)
    old = _band_fractions(prior)
    both = _band_fractions(window)
    if cur["n"] == 0 or old["n"] == 0:
        raise UndefinedFeatureError(f"no readings in a 7-day window before day {day_index}")
    night_cur = _band_fractions(recent[:, NIGHT_SLOTS])
    night_old = _band_fractions(prior[:, NIGHT_SLOTS])
    day_cur = _band_fractions(recent[:, DAY_SLOTS])

    gri_cur = glycemia_risk_index(cur["very_low"], cur["low"], cur["high"], cur["very_high"])
    gri_old = glycemia_risk_index(old["very_low"], old["low"], old["high"], old["very_high"])

    demo = asdict(demographics) if isinstance(demographics, Demographics) else dict(demographics)
    demo = {k: demo[k] for k in DEMOGRAPHIC_NAMES}
    demo["days_since_msg"] = min(float(demo["days_since_msg"]), DAYS_SINCE_MSG_CAP)

    values = {
        "g_7dr": cur["mean"],
        "very_low_7dr": cur["very_low"],
        "low_7dr": cur["low"],
        "in_range_7dr": cur["in_range"],
        "high_7dr": cur["high"],
        "very_high_7dr": cur["very_high"],
        "gri_7dr": gri_cur,
        "g_14dr": both["mean"],
        "very_low_14dr": both["very_low"],
        "low_14dr": both["low"],
        "in_range_14dr": both["in_range"],
        "high_14dr": both["high"],
        "very_high_14dr": both["very_high"],
        "gri_14dr": glycemia_risk_index(both["very_low"], both["low"], both["high"],
                                        both["very_high"]),
        "night_very_low_7dr": night_cur["very_low"],
        "night_low_7dr": night_cur["low"],
        "night_high_7dr": night_cur["high"],
        "night_very_high_7dr": night_cur["very_high"],
        "day_very_low_7dr": day_cur["very_low"],
        "day_low_7dr": day_cur["low"],
        "day_high_7dr": day_cur["high"],
        "day_very_high_7dr": day_cur["very_high"],
        "time_worn_7dr": cur["n"] / recent.size,
        "night_worn_7dr": night_cur["n"] / (7 * NIGHT_SLOTS.sum()),
        "day_worn_7dr": day_cur["n"] / (7 * DAY_SLOTS.sum()),
        "gri_7dr_7d_delta": gri_cur - gri_old,
        "very_low_7dr_7d_delta": cur["very_low"] - old["very_low"],
        "low_7dr_7d_delta": cur["low"] - old["low"],
        "in_range_7dr_7d_delta": cur["in_range"] - old["in_range"],
        "very_high_7dr_7d_delta": cur["very_high"] - old["very_high"],
        "night_very_low_7dr_7d_delta": night_cur["very_low"] - night_old["very_low"],
        "night_low_7dr_7d_delta": night_cur["low"] - night_old["low"],
        "night_high_7dr_7d_delta": night_cur["high"] - night_old["high"],
        **demo,
    }
    flags = risk_flags(values)
    values.update(dict(zip(FLAG_NAMES, (int(f) for f in flags))))
    return ClinicalFeatures(**values)


# --------------------------------------------------------------------------
# Vectorised path used when featurising whole panels.


def daily_counts(readings: np.ndarray) -> dict[str, np.ndarray]:
    """Per-day reading counts by glucose band, for all/night/day slots."""
    days = readings.size // SLOTS_PER_DAY
    g = readings[: days * SLOTS_PER_DAY].reshape(days, SLOTS_PER_DAY)
    present = ~np.isnan(g)
    with np.errstate(invalid="ignore"):
        bands = {
            "n": present,
            "very_low": g < VERY_LOW_MGDL,
            "low": g < LOW_MGDL,
            "high": g > HIGH_MGDL,
            "very_high": g > VERY_HIGH_MGDL,
        }
    out = {"gsum": np.where(present, g, 0.0).sum(axis=1)}
    for name, mask in bands.items():
        out[name] = mask.sum(axis=1)
        out[f"night_{name}"] = mask[:, NIGHT_SLOTS].sum(axis=1)
        out[f"day_{name}"] = mask[:, DAY_SLOTS].sum(axis=1)
    return out


def _window_sums(daily: np.ndarray, start: np.ndarray, stop: np.ndarray) -> np.ndarray:
    c = np.concatenate([[0], np.cumsum(daily)])
    return c[stop] - c[start]


def _frac(count, n, empty=np.nan):
    n = np.asarray(n, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, count / np.where(n > 0, n, 1.0), empty)


def window_feature_table(readings: np.ndarray, days: np.ndarray,
                         demographics: pd.DataFrame | Mapping) -> pd.DataFrame:
    """Features for many decision days of one patient at once.

    Rows whose current or prior 7-day window has no readings come back with
    NaN range fractions; callers drop them.
    """
    return pd.DataFrame(window_feature_columns(readings, days, demographics))


def window_feature_columns(readings: np.ndarray, days: np.ndarray,
                           demographics: pd.DataFrame | Mapping) -> dict[str, np.ndarray]:
    """Column arrays behind :func:`window_feature_table`, in feature order."""
    days = np.asarray(days, dtype=int)
    counts = daily_counts(readings)
    cur = {k: _window_sums(v, days - 7, days) for k, v in counts.items()}
    old = {k: _window_sums(v, days - 14, days - 7) for k, v in counts.items()}
    both = {k: cur[k] + old[k] for k in counts}

    def bands(s, prefix=""):
        n = s[f"{prefix}n"]
        empty = np.nan if prefix == "" else 0.0
        low = _frac(s[f"{prefix}low"], n, empty)
        high = _frac(s[f"{prefix}high"], n, empty)
        return {
            "very_low": _frac(s[f"{prefix}very_low"], n, empty),
            "low": low,
            "in_range": _frac(n - s[f"{prefix}low"] - s[f"{prefix}high"], n, empty),
            "high": high,
            "very_high": _frac(s[f"{prefix}very_high"], n, empty),
        }

    c, o, b = bands(cur), bands(old), bands(both)
    nc, no = bands(cur, "night_"), bands(old, "night_")
    dc = bands(cur, "day_")

    def gri(x):
        return _gri(x["very_low"], x["low"], x["high"], x["very_high"])

    gc, go = gri(c), gri(o)
    out = {
        "g_7dr": _frac(cur["gsum"], cur["n"]),
        **{f"{k}_7dr": c[k] for k in ("very_low", "low", "in_range", "high", "very_high")},
        "gri_7dr": gc,
        "g_14dr": _frac(both["gsum"], both["n"]),
        **{f"{k}_14dr": b[k] for k in ("very_low", "low", "in_range", "high", "very_high")},
        "gri_14dr": gri(b),
        **{f"night_{k}_7dr": nc[k] for k in ("very_low", "low", "high", "very_high")},
        **{f"day_{k}_7dr": dc[k] for k in ("very_low", "low", "high", "very_high")},
        "time_worn_7dr": cur["n"] / (7.0 * SLOTS_PER_DAY),
        "night_worn_7dr": cur["night_n"] / (7.0 * NIGHT_SLOTS.sum()),
        "day_worn_7dr": cur["day_n"] / (7.0 * DAY_SLOTS.sum()),
        "gri_7dr_7d_delta": gc - go,
        **{f"{k}_7dr_7d_delta": c[k] - o[k]
           for k in ("very_low", "low", "in_range", "very_high")},
        **{f"night_{k}_7dr_7d_delta": nc[k] - no[k] for k in ("very_low", "low", "high")},
    }
    for name in DEMOGRAPHIC_NAMES:
        out[name] = np.broadcast_to(np.asarray(demographics[name]), days.shape)
    out["days_since_msg"] = np.minimum(out["days_since_msg"].astype(float), DAYS_SINCE_MSG_CAP)
    with np.errstate(invalid="ignore"):
        out["large_tir_drop"] = (out["in_range_7dr_7d_delta"] < LARGE_TIR_DROP_THRESHOLD).astype(int)
        out["low_tir"] = (out["in_range_7dr"] < LOW_TIR_THRESHOLD).astype(int)
        out["lows"] = (out["low_7dr"] > LOWS_THRESHOLD).astype(int)
        out["very_lows"] = (out["very_low_7dr"] > VERY_LOWS_THRESHOLD).astype(int)
    return {name: np.asarray(out[name]) for name in FEATURE_NAMES}
