"""Synthetic remote-monitoring cohort with a confounded logging policy.

Every patient owns an independent random stream derived from
``(seed, patient_id)``, so a patient's rows never depend on who else is in
the cohort and serial/parallel generation agree bitwise.

Structural model for a decision row with features ``s`` and action ``a``::

    reward = control_response(s) + effect(s, a) + noise
    control_response(s) = -0.3 * in_range_7dr_7d_delta      (regression to mean)

The logging policy is a multinomial logit over action classes driven only by
clinician-visible features, so conditional ignorability holds by
construction while messages still go preferentially to patients whose time
in range just dropped.  CGM traces are exogenous to the actions.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from .features import (
    FEATURE_NAMES,
    SLOTS_PER_DAY,
    WINDOW_DAYS,
    window_feature_columns,
)

ACTIONS = ("control", "highs_and_lows", "highs_only", "lows_only", "other")
ACTION_IDS = {name: i for i, name in enumerate(ACTIONS)}
CONTROL = 0

LABEL_NAMES = (
    "recommends_insulin_dose_change",
    "recommends_changing_basal_or_long_acting_insulin",
    "recommends_more_correction_doses",
    "recommends_changing_carb_ratio",
    "reminds_patient_to_bolus",
    "recommends_insulin_change_at_night",
    "recommends_insulin_change_during_the_day",
    "recommendations_target_high_glucose_or_low_time_in_range",
    "recommendations_target_low_glucose",
    "mentions_recent_visit",
    "mentions_patient_schedule",
)
EMBEDDING_DIM = 16
EMBEDDING_NAMES = tuple(f"embedding_{j}" for j in range(EMBEDDING_DIM))
POPULATIONS = ("pilot", "4T_1", "4T_2", "TIPS")


class WindowTooShortError(ValueError):
    pass


class UnknownActionError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class MissingOracleError(ValueError):
    pass


@dataclass(frozen=True)
class CohortConfig:
    pump_rate: float = 0.7
    aid_rate_given_pump: float = 0.6
    age_range: tuple[float, float] = (8.0, 21.0)
    female_rate: float = 0.5
    public_insurance_rate: float = 0.35
    english_rate: float = 0.8
    population_probs: tuple[float, ...] = (0.27, 0.33, 0.13, 0.27)
    onset_months_range: tuple[float, float] = (0.0, 24.0)
    mean_glucose_center: float = 180.0
    mean_glucose_pump_shift: float = -20.0
    mean_glucose_sd: float = 35.0
    volatility_range: tuple[float, float] = (40.0, 70.0)
    responsiveness_beta: tuple[float, float] = (4.0, 2.0)
    missing_rate_range: tuple[float, float] = (0.02, 0.25)


@dataclass(frozen=True)
class EffectParams:
    """Coefficients of the ground-truth effect function (TIR-fraction units)."""

    highs: float = 0.12
    lows: float = 0.06
    other: float = 0.005
    no_pump_boost: float = 0.5
    combined_factor: float = 0.8
    regression_to_mean: float = -0.3


@dataclass(frozen=True)
class SimConfig:
    effect: EffectParams = field(default_factory=EffectParams)
    # trace dynamics
    level_ar: float = 0.8
    level_sd: float = 18.0
    slot_timescale_min: float = 60.0
    diurnal_amplitude: float = 12.0
    gap_day_rate: float = 0.02
    # logging policy: intercepts and confounding weights per non-control class
    intercepts: tuple[float, ...] = (-4.6, -3.6, -4.8, -4.0)
    propensity_floor: float = 0.01
    refractory_days: int = 7
    reward_noise_sd: float = 0.01
    min_wear_7d: float = 0.2  # rows below this 7-day wear fraction are not logged
    # message embedding geometry
    message_space_seed: int = 20240101
    style_count: int = 4
    style_scale: float = 3.0
    content_scale: float = 0.8
    embedding_noise_sd: float = 0.4


@dataclass(frozen=True)
class PatientLatent:
    patient_id: int
    baseline_mean_glucose: float
    glucose_volatility: float
    pump_user: bool
    aid_user: bool
    age: float
    months_since_onset: float
    responsiveness: float
    sexF: int
    public_insurance: int
    english_primary_language: int
    population: str
    missing_rate: float

    def __post_init__(self):
        if not 80.0 <= self.baseline_mean_glucose <= 350.0:
            raise ValueError("baseline_mean_glucose outside [80, 350]")
        if not 0.0 <= self.responsiveness <= 1.0:
            raise ValueError("responsiveness outside [0, 1]")
        if self.population not in POPULATIONS:
            raise ValueError(f"unknown population {self.population!r}")

    @property
    def population_indicators(self) -> dict[str, int]:
        return {f"pop_{p}": int(p == self.population) for p in POPULATIONS}


@dataclass(frozen=True)
class CgmTrace:
    """Glucose readings (mg/dL) at 5-minute cadence; NaN marks a missing slot."""

    readings: np.ndarray

    def __len__(self) -> int:
        return self.readings.size

    @property
    def missing_fraction(self) -> float:
        return float(np.isnan(self.readings).mean()) if self.readings.size else 0.0


@dataclass(frozen=True)
class RawAction:
    class_label: str
    boolean_labels: tuple[bool, ...]
    embedding: np.ndarray

    def __post_init__(self):
        if self.class_label not in ACTIONS:
            raise UnknownActionError(self.class_label)
        if len(self.boolean_labels) != len(LABEL_NAMES):
            raise ValueError("expected 11 boolean labels")

    @property
    def class_id(self) -> int:
        return ACTION_IDS[self.class_label]


def action_id(action) -> int:
    """Normalise a class name, class id or RawAction to a class id."""
    if isinstance(action, RawAction):
        return action.class_id
    if isinstance(action, str):
        if action not in ACTION_IDS:
            raise UnknownActionError(action)
        return ACTION_IDS[action]
    a = int(action)
    if a != action or not 0 <= a < len(ACTIONS):
        raise UnknownActionError(action)
    return a


# --------------------------------------------------------------------------
# Ground truth


class OracleCate:
    """Ground-truth effect function of the simulator.

    ``features`` may be a ClinicalFeatures, a mapping of scalars, or a
    DataFrame (vectorised).  ``responsiveness`` is the patient's latent
    effect multiplier.
    """

    def __init__(self, params: EffectParams | None = None):
        self.params = params or EffectParams()

    def effect(self, features, action, responsiveness=1.0):
        a = action_id(action)
        p = self.params
        if a == CONTROL:
            out = np.zeros(np.shape(features["high_7dr"]))
        else:
            high = np.asarray(features["high_7dr"], dtype=float)
            low = np.asarray(features["low_7dr"], dtype=float)
            pump = np.asarray(features["using_pump"], dtype=float)
            resp = np.asarray(responsiveness, dtype=float)
            highs = p.highs * high * (1.0 + p.no_pump_boost * (1.0 - pump)) * resp
            lows = p.lows * low * resp
            if a == ACTION_IDS["highs_only"]:
                out = highs
            elif a == ACTION_IDS["lows_only"]:
                out = lows
            elif a == ACTION_IDS["highs_and_lows"]:
                out = p.combined_factor * (highs + lows)
            else:
                out = np.full(np.broadcast(high, resp).shape, p.other)
        out = np.asarray(out, dtype=float)
        return float(out) if out.ndim == 0 else out

    def effects(self, features, responsiveness=1.0) -> np.ndarray:
        """Matrix of effects, one column per action class (control first)."""
        cols = [np.broadcast_to(self.effect(features, a, responsiveness),
                                np.shape(np.asarray(features["high_7dr"])))
                for a in range(len(ACTIONS))]
        return np.stack(cols, axis=-1).astype(float)

    def control_response(self, features):
        delta = np.asarray(features["in_range_7dr_7d_delta"], dtype=float)
        out = self.params.regression_to_mean * delta
        return float(out) if out.ndim == 0 else out

    def rho(self, features, action, responsiveness=1.0):
        return self.control_response(features) + self.effect(features, action, responsiveness)

    def __call__(self, features, action, responsiveness=1.0):
        return self.effect(features, action, responsiveness)


def true_cate(features, action_class, responsiveness=1.0, params: EffectParams | None = None):
    """Ground-truth effect of ``action_class`` relative to control."""
    return OracleCate(params).effect(features, action_class, responsiveness)


# --------------------------------------------------------------------------
# Cohort and panel


def sample_cohort(n: int, seed: int, config: CohortConfig | None = None) -> list[PatientLatent]:
    cfg = config or CohortConfig()
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    pump = rng.random(n) < cfg.pump_rate
    aid = pump & (rng.random(n) < cfg.aid_rate_given_pump)
    age = rng.uniform(*cfg.age_range, size=n)
    onset = rng.uniform(*cfg.onset_months_range, size=n)
    mean_g = cfg.mean_glucose_center + cfg.mean_glucose_pump_shift * pump \
        + cfg.mean_glucose_sd * rng.standard_normal(n)
    mean_g = np.clip(mean_g, 80.0, 350.0)
    vol = rng.uniform(*cfg.volatility_range, size=n)
    resp = rng.beta(*cfg.responsiveness_beta, size=n)
    female = rng.random(n) < cfg.female_rate
    public = rng.random(n) < cfg.public_insurance_rate
    english = rng.random(n) < cfg.english_rate
    pop = rng.choice(len(POPULATIONS), size=n, p=np.asarray(cfg.population_probs))
    miss = rng.uniform(*cfg.missing_rate_range, size=n)
    return [
        PatientLatent(
            patient_id=i,
            baseline_mean_glucose=float(mean_g[i]),
            glucose_volatility=float(vol[i]),
            pump_user=bool(pump[i]),
            aid_user=bool(aid[i]),
            age=float(age[i]),
            months_since_onset=float(onset[i]),
            responsiveness=float(resp[i]),
            sexF=int(female[i]),
            public_insurance=int(public[i]),
            english_primary_language=int(english[i]),
            population=POPULATIONS[pop[i]],
            missing_rate=float(miss[i]),
        )
        for i in range(n)
    ]


def logging_propensities(features, confounding_strength: float,
                         config: SimConfig | None = None) -> np.ndarray:
    """True logging probabilities over action classes, shape (n, 5).

    Uses only clinician-visible (TIDE) fields.  A uniform floor is mixed in
    so every class keeps probability at least ``propensity_floor``.
    """
    cfg = config or SimConfig()
    f = {k: np.asarray(features[k], dtype=float) for k in
         ("large_tir_drop", "low_tir", "lows", "very_lows", "g_7dr")}
    cs = float(confounding_strength)
    g = (f["g_7dr"] - 160.0) / 40.0
    a_hl, a_h, a_l, a_o = cfg.intercepts
    logits = np.stack([
        np.zeros_like(g),
        a_hl + cs * (0.5 * f["lows"] + 0.4 * f["low_tir"] + 0.6 * f["large_tir_drop"]),
        a_h + cs * (0.8 * f["large_tir_drop"] + 0.4 * f["low_tir"] + 0.3 * g),
        a_l + cs * (0.9 * f["lows"] + 0.5 * f["very_lows"]),
        a_o + cs * (0.6 * f["large_tir_drop"]),
    ], axis=-1)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    k = len(ACTIONS)
    return cfg.propensity_floor + (1.0 - k * cfg.propensity_floor) * p


def _message_geometry(cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(cfg.message_space_seed)
    styles = rng.standard_normal((cfg.style_count, EMBEDDING_DIM))
    styles *= cfg.style_scale / np.linalg.norm(styles, axis=1, keepdims=True)
    content = rng.standard_normal((len(ACTIONS) - 1, EMBEDDING_DIM))
    content *= cfg.content_scale / np.linalg.norm(content, axis=1, keepdims=True)
    return styles, content


_HIGH_SIDE = (7, 2, 4)  # target_high, more_correction, remind_bolus
_TARGET_LOW = 8


def _message_labels(action: int, u: np.ndarray) -> np.ndarray:
    """Boolean labels for a message of class ``action`` from 11 uniforms."""
    lab = np.zeros(len(LABEL_NAMES), dtype=bool)
    if action == CONTROL:
        return lab
    high_side = action in (ACTION_IDS["highs_and_lows"], ACTION_IDS["highs_only"])
    low_side = action in (ACTION_IDS["highs_and_lows"], ACTION_IDS["lows_only"])
    if high_side:
        lab[7] = u[7] < 0.7
        lab[2] = u[2] < 0.3
        lab[4] = u[4] < 0.3
        if not lab[list(_HIGH_SIDE)].any():
            lab[7] = True
    lab[_TARGET_LOW] = low_side
    insulin = action != ACTION_IDS["other"]
    lab[1] = u[1] < (0.4 if insulin else 0.3)
    lab[3] = u[3] < (0.3 if insulin else 0.2)
    lab[5] = u[5] < (0.4 if insulin else 0.2)
    lab[6] = u[6] < (0.35 if insulin else 0.2)
    lab[9] = u[9] < (0.1 if insulin else 0.3)
    lab[10] = u[10] < (0.1 if insulin else 0.3)
    lab[0] = lab[1] or lab[2] or lab[3] or lab[5] or lab[6]
    return lab


def _patient_stream(seed: int, patient_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(patient_id)]))


def generate_trace(latent: PatientLatent, days: int, rng: np.random.Generator,
                   config: SimConfig | None = None) -> np.ndarray:
    """Mean-reverting glucose walk, rounded to mg/dL, clipped to [40, 400]."""
    cfg = config or SimConfig()
    n = days * SLOTS_PER_DAY
    phi = cfg.level_ar
    level_noise = rng.standard_normal(days + 30) * cfg.level_sd
    level = lfilter([1.0], [1.0, -phi], level_noise)[30:]
    theta = np.exp(-5.0 / cfg.slot_timescale_min)
    burn = 600
    z = rng.standard_normal(n + burn)
    slot = lfilter([np.sqrt(1.0 - theta ** 2) * latent.glucose_volatility], [1.0, -theta], z)[burn:]
    tod = np.tile(np.arange(SLOTS_PER_DAY), days) / SLOTS_PER_DAY
    diurnal = cfg.diurnal_amplitude * np.sin(2.0 * np.pi * (tod - 0.05))
    x = latent.baseline_mean_glucose + np.repeat(level, SLOTS_PER_DAY) + diurnal + slot
    x = np.clip(np.round(x), 40.0, 400.0)
    missing = rng.random(n) < latent.missing_rate
    gap_days = rng.random(days) < cfg.gap_day_rate
    missing |= np.repeat(gap_days, SLOTS_PER_DAY)
    x[missing] = np.nan
    return x.astype(np.float32)


def _simulate_patient(latent: PatientLatent, days: int, confounding_strength: float,
                      seed: int, cfg: SimConfig):
    rng = _patient_stream(seed, latent.patient_id)
    trace = generate_trace(latent, days, rng, cfg)
    t = np.arange(WINDOW_DAYS, days + 1)
    demo = {
        "sexF": latent.sexF,
        "public_insurance": latent.public_insurance,
        "english_primary_language": latent.english_primary_language,
        **latent.population_indicators,
        "age": latent.age + t / 365.25,
        "months_since_onset": latent.months_since_onset + t / 30.4375,
        "using_pump": int(latent.pump_user),
        "using_aid": int(latent.aid_user),
        "days_since_msg": np.zeros(t.size),
    }
    feats = window_feature_columns(trace.astype(float), t, demo)
    defined = ~np.isnan(feats["in_range_7dr"]) & (feats["time_worn_7dr"] >= cfg.min_wear_7d)
    feats = {k: np.nan_to_num(v, nan=0.0) if v.dtype.kind == "f" else v for k, v in feats.items()}
    props = logging_propensities(feats, confounding_strength, cfg)

    u_action = rng.random(t.size)
    u_labels = rng.random((t.size, len(LABEL_NAMES)))
    style = rng.integers(0, cfg.style_count, size=t.size)
    emb_noise = rng.standard_normal((t.size, EMBEDDING_DIM)) * cfg.embedding_noise_sd
    noise = np.clip(rng.standard_normal(t.size) * cfg.reward_noise_sd,
                    -3.0 * cfg.reward_noise_sd, 3.0 * cfg.reward_noise_sd)

    cum = np.cumsum(props, axis=1)
    keep = np.zeros(t.size, dtype=bool)
    actions = np.zeros(t.size, dtype=int)
    since = np.zeros(t.size)
    last_msg = None
    for j, day in enumerate(t):
        if last_msg is not None and day - last_msg < cfg.refractory_days:
            continue
        if not defined[j]:
            continue
        keep[j] = True
        since[j] = 60.0 if last_msg is None else min(60.0, float(day - last_msg))
        a = int(np.searchsorted(cum[j], u_action[j], side="right"))
        actions[j] = min(a, len(ACTIONS) - 1)
        if actions[j] != CONTROL:
            last_msg = int(day)

    feats["days_since_msg"] = since
    idx = np.flatnonzero(keep)
    feats = {k: v[idx] for k, v in feats.items()}
    acts = actions[idx]
    styles, content = _message_geometry(cfg)
    labels = np.array([_message_labels(a, u_labels[j]) for a, j in zip(acts, idx)],
                      dtype=bool).reshape(idx.size, len(LABEL_NAMES))
    emb = np.zeros((idx.size, EMBEDDING_DIM))
    sent = acts != CONTROL
    emb[sent] = styles[style[idx][sent]] + content[acts[sent] - 1] + emb_noise[idx][sent]

    oracle = OracleCate(cfg.effect)
    effects = oracle.effects(feats, latent.responsiveness)
    base = oracle.control_response(feats)
    reward = base + effects[np.arange(idx.size), acts] + noise[idx]

    cols = {"patient_id": np.full(idx.size, latent.patient_id), "day": t[idx],
            "action_class": acts, "reward": reward, **feats}
    cols.update({n: labels[:, j].astype(int) for j, n in enumerate(LABEL_NAMES)})
    cols.update({n: emb[:, j] for j, n in enumerate(EMBEDDING_NAMES)})
    rows = pd.DataFrame(cols)
    orc = {"patient_id": np.full(idx.size, latent.patient_id), "day": t[idx]}
    orc.update({f"prop_{name}": props[idx, k] for k, name in enumerate(ACTIONS)})
    orc.update({f"effect_{name}": effects[:, k] for k, name in enumerate(ACTIONS)})
    orc["responsiveness"] = np.full(idx.size, latent.responsiveness)
    orc["control_response"] = base
    orc = pd.DataFrame(orc)
    return rows, orc, trace


@dataclass
class LoggedPanel:
    """Logged patient-day decision rows plus a separately held oracle block.

    ``rows`` carries what an analyst would see: ids, day, logged action class
    id, reward, clinical features, message labels and embedding.  ``oracle``
    is aligned row-for-row and holds true propensities and effects.
    ``traces`` maps patient id to the full CGM trace (for window projections).
    """

    rows: pd.DataFrame
    oracle: pd.DataFrame | None
    traces: dict[int, np.ndarray]
    days: int
    confounding_strength: float = 0.0
    config: SimConfig = field(default_factory=SimConfig)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def patient_ids(self) -> np.ndarray:
        return np.unique(self.rows["patient_id"].to_numpy())

    def trace_window(self, i: int) -> CgmTrace:
        pid, day = int(self.rows["patient_id"].iat[i]), int(self.rows["day"].iat[i])
        tr = self.traces[pid]
        return CgmTrace(tr[(day - WINDOW_DAYS) * SLOTS_PER_DAY: day * SLOTS_PER_DAY])

    def raw_action(self, i: int) -> RawAction:
        r = self.rows.iloc[i]
        return RawAction(
            class_label=ACTIONS[int(r["action_class"])],
            boolean_labels=tuple(bool(r[n]) for n in LABEL_NAMES),
            embedding=r[list(EMBEDDING_NAMES)].to_numpy(dtype=float),
        )

    def features(self) -> pd.DataFrame:
        return self.rows[list(FEATURE_NAMES)]

    def subset(self, mask_or_index) -> "LoggedPanel":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        rows = self.rows.iloc[idx].reset_index(drop=True)
        oracle = None if self.oracle is None else self.oracle.iloc[idx].reset_index(drop=True)
        keep = set(np.unique(rows["patient_id"]).tolist())
        traces = {k: v for k, v in self.traces.items() if k in keep}
        return replace(self, rows=rows, oracle=oracle, traces=traces)

    def for_patients(self, patient_ids) -> "LoggedPanel":
        return self.subset(self.rows["patient_id"].isin(list(patient_ids)).to_numpy())

    def without_oracle(self) -> "LoggedPanel":
        return replace(self, oracle=None)

    def require_oracle(self) -> pd.DataFrame:
        if self.oracle is None:
            raise MissingOracleError("panel carries no oracle block")
        return self.oracle

    def true_effects(self) -> np.ndarray:
        o = self.require_oracle()
        return o[[f"effect_{a}" for a in ACTIONS]].to_numpy()

    def true_propensities(self) -> np.ndarray:
        o = self.require_oracle()
        return o[[f"prop_{a}" for a in ACTIONS]].to_numpy()

    # --- serialisation -------------------------------------------------
    def to_csv(self, path, oracle_path=None, traces_path=None) -> None:
        out = self.rows.copy()
        out["action_class"] = [ACTIONS[a] for a in out["action_class"]]
        out.to_csv(path, index=False)
        if oracle_path is not None and self.oracle is not None:
            self.oracle.to_csv(oracle_path, index=False)
        if traces_path is not None:
            np.savez_compressed(traces_path, **{str(k): v for k, v in self.traces.items()})

    @classmethod
    def from_csv(cls, path, oracle_path=None, traces_path=None, days=None,
                 confounding_strength=0.0) -> "LoggedPanel":
        rows = pd.read_csv(path)
        rows["action_class"] = rows["action_class"].map(ACTION_IDS).astype(int)
        oracle = None
        if oracle_path is not None and Path(oracle_path).exists():
            oracle = pd.read_csv(oracle_path)
        traces = {}
        if traces_path is not None and Path(traces_path).exists():
            with np.load(traces_path) as z:
                traces = {int(k): z[k] for k in z.files}
        if days is None:
            days = int(rows["day"].max()) if len(rows) else WINDOW_DAYS
        return cls(rows=rows, oracle=oracle, traces=traces, days=int(days),
                   confounding_strength=confounding_strength)


def simulate_panel(cohort: Sequence[PatientLatent], days: int, confounding_strength: float,
                   seed: int, config: SimConfig | None = None,
                   workers: int | None = None) -> LoggedPanel:
    """Simulate ``days`` days for every patient in ``cohort``.

    Decision rows exist for days 14..days (each preceded by a full window)
    on which the patient is outside the refractory week after a message.
    """
    if days < WINDOW_DAYS:
        raise WindowTooShortError(f"days={days} < {WINDOW_DAYS}")
    if confounding_strength < 0:
        raise ValueError("confounding_strength must be >= 0")
    cfg = config or SimConfig()
    workers = workers or int(os.environ.get("RPMPOLICY_WORKERS", "1"))
    args = [(p, days, confounding_strength, seed, cfg) for p in cohort]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_simulate_patient_star, args))
    else:
        parts = [_simulate_patient(*a) for a in args]
    if parts:
        rows = pd.concat([p[0] for p in parts], ignore_index=True)
        oracle = pd.concat([p[1] for p in parts], ignore_index=True)
    else:
        rows = pd.DataFrame(columns=["patient_id", "day", "action_class", "reward",
                                     *FEATURE_NAMES, *LABEL_NAMES, *EMBEDDING_NAMES])
        oracle = pd.DataFrame(columns=["patient_id", "day"])
    traces = {p.patient_id: part[2] for p, part in zip(cohort, parts)}
    return LoggedPanel(rows=rows, oracle=oracle, traces=traces, days=days,
                       confounding_strength=float(confounding_strength), config=cfg)


def _simulate_patient_star(args):
    return _simulate_patient(*args)


# --------------------------------------------------------------------------
# Oracle policy value


def att_from_table(values: np.ndarray, days: np.ndarray, actions: np.ndarray, K) -> float:
    """(1/T) sum_t (1/K_t) sum_i values[i, actions[i]] over decision days.

    ``values`` has one column per action class with column 0 (control)
    identically zero.  ``K`` is an int or a mapping day -> capacity.
    """
    values = np.asarray(values, dtype=float)
    days = np.asarray(days)
    actions = np.asarray(actions, dtype=int)
    if values.shape[0] == 0:
        return 0.0
    picked = values[np.arange(values.shape[0]), actions]
    uniq, inv = np.unique(days, return_inverse=True)
    treated = np.bincount(inv, weights=(actions != CONTROL).astype(float), minlength=uniq.size)
    sums = np.bincount(inv, weights=picked, minlength=uniq.size)
    caps = np.array([K[d] if isinstance(K, Mapping) else K for d in uniq], dtype=float)
    if np.any(treated > caps):
        raise CapacityError("more non-control assignments than capacity on some day")
    with np.errstate(invalid="ignore", divide="ignore"):
        per_day = np.where(caps > 0, sums / np.where(caps > 0, caps, 1.0), 0.0)
    return float(per_day.mean())


def oracle_att(panel: LoggedPanel, assignments: pd.DataFrame, K) -> float:
    """Exact ATT of per-day assignments using the panel's true effects.

    ``assignments`` has columns ``patient_id``, ``day`` and ``action_class``
    (class id or name); patient-days absent from it count as control.
    """
    effects = panel.true_effects()
    key = panel.rows[["patient_id", "day"]].reset_index(drop=True)
    a = assignments[["patient_id", "day", "action_class"]].copy()
    a["action_class"] = [action_id(x) for x in a["action_class"]]
    merged = a.merge(key.reset_index(), on=["patient_id", "day"], how="left")
    if merged["index"].isna().any():
        raise KeyError("assignment refers to a patient-day absent from the panel")
    idx = merged["index"].to_numpy(dtype=int)
    return att_from_table(effects[idx], merged["day"].to_numpy(),
                          merged["action_class"].to_numpy(), K)


def cohort_frame(cohort: Sequence[PatientLatent]) -> pd.DataFrame:
    return pd.DataFrame([asdict(p) for p in cohort])
