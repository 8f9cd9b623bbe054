"""End-to-end sweep: simulate, featurize, split, fit, evaluate, report.

Each stage reads what earlier stages wrote into the run directory, so the
stages can be run one at a time from the command line or all at once.
Fitted cells are cached under ``<output_dir>/cache`` keyed by a hash of
everything that determines them.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from scipy import stats

from . import plotting
from .evaluation import (DEFAULT_GRID, HISTORY_WEEKS, DrScoreTable, Nuisances, SplitIndex, TocReport,
                         assert_disjoint, build_control_covariates, evaluation_rows, fit_nuisances,
                         panel_dr_scores, split_by_patient, toc_curve)
from .features import FEATURE_NAMES
from .learners.cate import BASE_METHODS, METHODS, CateModel, fit_cate_arrays, fit_ensemble
from .policy import best_actions, daily_policy, day_capacities
from .representations import (ACTION_SCHEMES, STATE_MODES, RepresentationArtifact, action_classes,
                              fit_action_artifact, fit_state_artifact, state_matrix)
from .simulate import ACTIONS, CONTROL, LoggedPanel, SimConfig, att_from_table, cohort_frame, sample_cohort, simulate_panel

log = logging.getLogger(__name__)

STAGES = ("simulate", "featurize", "split", "fit", "evaluate", "report")
SLICE_FEATURES = ("in_range_7dr", "in_range_7dr_7d_delta", "g_7dr", "using_pump")
# expected sign of the relation between each feature and the best-action effect
SLICE_DIRECTIONS = {"in_range_7dr": -1, "in_range_7dr_7d_delta": -1, "g_7dr": 1, "using_pump": -1}
TEST_STAGE = "test_evaluation"


class ConfigError(ValueError):
    """Invalid run configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class RunConfig:
    """Sweep configuration.  ``seed`` has no default: every run names its seed."""

    seed: int
    n_patients: int = 600
    days: int = 180
    confounding_strength: float = 2.0
    reward_noise_sd: float = SimConfig.reward_noise_sd
    state_modes: tuple[str, ...] = STATE_MODES
    action_schemes: tuple[str, ...] = ACTION_SCHEMES
    methods: tuple[str, ...] = METHODS
    grid: tuple[float, ...] = DEFAULT_GRID
    bootstrap: int = 500
    level: float = 0.95
    history_weeks: int = 2
    history_sweep: tuple[int, ...] = ()
    eval_stride: int = 7
    top_k_features: int = 14
    clip_floor: float = 0.01
    skip_negative_scores: bool = False
    min_class_rows: int = 20
    slice_features: tuple[str, ...] = SLICE_FEATURES
    output_dir: str = "runs/default"
    workers: int = 1

    def __post_init__(self):
        problems = []
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)):
            problems.append("seed must be an integer")
        if self.n_patients < 3:
            problems.append("n_patients must be at least 3")
        if self.days < 15:
            problems.append("days must be at least 15")
        if self.confounding_strength < 0:
            problems.append("confounding_strength must be non-negative")
        if self.reward_noise_sd < 0:
            problems.append("reward_noise_sd must be non-negative")
        for name, allowed in (("state_modes", STATE_MODES), ("action_schemes", ACTION_SCHEMES),
                              ("methods", METHODS)):
            vals = getattr(self, name)
            if not vals:
                problems.append(f"{name} is empty")
            bad = [v for v in vals if v not in allowed]
            if bad:
                problems.append(f"unknown {name}: {bad}; allowed {list(allowed)}")
        if "ensemble" in self.methods and len([m for m in self.methods if m != "ensemble"]) < 2:
            problems.append("ensemble needs at least two base methods in the sweep")
        if not self.grid or any(not 0 < q <= 1 for q in self.grid):
            problems.append("grid values must lie in (0, 1]")
        if not any(abs(q - 0.25) < 1e-9 for q in self.grid):
            problems.append("grid must contain 0.25")
        if self.bootstrap < 1:
            problems.append("bootstrap must be positive")
        if not 0 < self.level < 1:
            problems.append("level must lie in (0, 1)")
        for h in (self.history_weeks, *self.history_sweep):
            if h not in HISTORY_WEEKS:
                problems.append(f"history weeks must be one of {HISTORY_WEEKS}, got {h}")
        if self.eval_stride < 1:
            problems.append("eval_stride must be positive")
        if not 1 <= self.top_k_features <= len(FEATURE_NAMES):
            problems.append(f"top_k_features must be in [1, {len(FEATURE_NAMES)}]")
        if not 0 < self.clip_floor < 0.2:
            problems.append("clip_floor must lie in (0, 0.2)")
        bad = [f for f in self.slice_features if f not in FEATURE_NAMES]
        if bad:
            problems.append(f"unknown slice features: {bad}")
        if self.min_class_rows < 10:
            problems.append("min_class_rows must be at least 10")
        if self.workers < 1:
            problems.append("workers must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_mapping(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        if "seed" not in d:
            raise ConfigError("configuration must set 'seed' explicitly")
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name in ("state_modes", "action_schemes", "methods", "grid", "history_sweep",
                          "slice_features"):
                if isinstance(v, (str, int, float)):
                    v = [v]
                if not isinstance(v, (list, tuple)):
                    raise ConfigError(f"{f.name} must be a list")
                v = tuple(float(x) for x in v) if f.name == "grid" else tuple(v)
            kw[f.name] = v
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        try:
            d = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read configuration {path}: {e}") from e
        return cls.from_mapping(d or {})

    def with_overrides(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_mapping(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def data_key(self) -> dict:
        """Fields that determine the simulated data and its split."""
        return {k: getattr(self, k) for k in ("seed", "n_patients", "days", "confounding_strength",
                                              "reward_noise_sd")}

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return _digest(d)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_jsonable).encode()).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serialisable: {type(o)}")


def _dump_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# Split access accounting


class SplitAccess:
    """Hands out split-restricted panels and records which stage asked for which part."""

    def __init__(self, panel: LoggedPanel, split: SplitIndex):
        self._panel = panel
        self.split = split
        self.log: list[tuple[str, str]] = []
        self._cache: dict[str, LoggedPanel] = {}

    def get(self, part: str, stage: str) -> LoggedPanel:
        self.log.append((part, stage))
        if part not in self._cache:
            self._cache[part] = self._panel.for_patients(self.split.part(part))
        return self._cache[part]

    def stages_reading(self, part: str) -> list[str]:
        return sorted({s for p, s in self.log if p == part})

    def assert_test_isolated(self) -> None:
        readers = self.stages_reading("test")
        if readers and readers != [TEST_STAGE]:
            raise RuntimeError(f"test split read by stages {readers}")


# --------------------------------------------------------------------------
# Panel-level CATE fitting


def fit_cate(method: str, train_panel: LoggedPanel, state_mode: str, action_scheme: str, seed: int = 0,
             artifact: RepresentationArtifact | None = None, history_weeks: int = 2,
             clip_floor: float = 0.01) -> CateModel:
    """Fit one base CATE method on a training panel under a state and action representation."""
    if method not in BASE_METHODS:
        raise ValueError(f"fit_cate fits base methods {BASE_METHODS}; use fit_ensemble for 'ensemble'")
    art = artifact
    if art is None:
        art = fit_state_artifact(train_panel, [state_mode], seed)
        art = fit_action_artifact(train_panel, [action_scheme], seed, art)
    S, names = state_matrix(train_panel, state_mode, art)
    A = action_classes(train_panel, action_scheme, art)
    y = train_panel.rows["reward"].to_numpy()
    groups = train_panel.rows["patient_id"].to_numpy()
    Xc = None
    if method == "dr_forest":
        cov = build_control_covariates(train_panel, history_weeks)
        S, A, y, groups, Xc = S[cov.rows], A[cov.rows], y[cov.rows], groups[cov.rows], cov.matrix
    return fit_cate_arrays(method, S, A, y, len(ACTIONS), seed, groups=groups, Xc=Xc,
                           clip_floor=clip_floor, state_mode=state_mode, action_scheme=action_scheme,
                           feature_names=names)


def _fit_cell(args) -> dict:
    method, S, A, y, groups, Xc, seed, clip_floor, mode, scheme, names, min_support = args
    model = fit_cate_arrays(method, S, A, y, len(ACTIONS), seed, groups=groups, Xc=Xc,
                            clip_floor=clip_floor, state_mode=mode, action_scheme=scheme,
                            feature_names=names, min_support=min_support)
    return model.to_dict()


# --------------------------------------------------------------------------
# Oracle effects per action scheme


def scheme_true_effects(panel: LoggedPanel, scheme: str, artifact: RepresentationArtifact | None,
                        reference: LoggedPanel | None = None) -> np.ndarray:
    """True effect of each represented action class for every row of ``panel``.

    For clinical classes this is the oracle table.  A k-means class mixes
    clinical classes, so its effect is the mixture of their effects with
    weights equal to the clinical-class shares of that cluster among the
    messages in ``reference`` (the training panel by default).
    """
    eff = panel.true_effects()
    if scheme == "clinical_rules":
        return eff
    ref = reference if reference is not None else panel
    rep = action_classes(ref, scheme, artifact)
    clin = ref.rows["action_class"].to_numpy()
    k = len(ACTIONS)
    mix = np.zeros((k, k))
    mix[0, 0] = 1.0
    for c in range(1, k):
        sel = rep == c
        if sel.any():
            mix[c] = np.bincount(clin[sel], minlength=k) / sel.sum()
    out = eff @ mix.T
    out[:, 0] = 0.0
    return out


def cell_regret(true_tau: np.ndarray, tau_hat: np.ndarray, pids, days, fraction: float = 0.25,
                skip_negative_scores: bool = False) -> float:
    """Oracle ATT of the optimal daily policy minus that of the induced one."""
    opt = daily_policy(true_tau, pids, days, fraction=fraction)
    ind = daily_policy(tau_hat, pids, days, fraction=fraction, skip_negative_scores=skip_negative_scores)
    caps = day_capacities(opt)
    v_opt = att_from_table(true_tau, opt["day"].to_numpy(), opt["action_class"].to_numpy(), caps)
    v_ind = att_from_table(true_tau, ind["day"].to_numpy(), ind["action_class"].to_numpy(), caps)
    return v_opt - v_ind


# --------------------------------------------------------------------------
# Slices


def report_cate_slices(model, panel: LoggedPanel, states, features=SLICE_FEATURES, out_dir=None,
                       n_bins: int = 10, rows=None) -> dict:
    """Predicted best-message effect against clinician features.

    The score is the largest predicted effect over the message classes.
    For each feature the rows are grouped into quantile bins (or by value
    for binary features) and the mean score per group is written as CSV and
    SVG.  Returns per-feature Spearman correlation between the raw feature
    and the score, with its p-value and whether the sign matches the
    expected direction.
    """
    unknown = [f for f in features if f not in FEATURE_NAMES]
    if unknown:
        raise KeyError(f"unknown feature(s) {unknown}")
    rows = np.arange(len(panel)) if rows is None else np.asarray(rows)
    tau = model.predict(states) if hasattr(model, "predict") else np.asarray(states, dtype=float)
    if tau.shape[1] < 2:
        raise ValueError("need at least one message class")
    _, score = best_actions(tau, include_control=False)
    out = {}
    for feat in features:
        x = panel.rows[feat].to_numpy(dtype=float)[rows]
        if np.unique(x).size <= 2:
            keys = x
        else:
            edges = np.unique(np.quantile(x, np.linspace(0, 1, n_bins + 1)))
            keys = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, max(0, edges.size - 2))
        df = pd.DataFrame({"key": keys, "x": x, "s": score})
        g = df.groupby("key")
        table = pd.DataFrame({"value": g["x"].mean(), "n": g.size(), "mean_score": g["s"].mean(),
                              "q25": g["s"].quantile(0.25), "q75": g["s"].quantile(0.75)}).reset_index(drop=True)
        if np.ptp(score) == 0 or np.ptp(x) == 0:
            rho, p = 0.0, 1.0
        else:
            res = stats.spearmanr(x, score)
            rho, p = float(res.statistic if hasattr(res, "statistic") else res[0]), float(res.pvalue)
        expected = SLICE_DIRECTIONS.get(feat, 0)
        out[feat] = {"spearman": rho, "p_value": p, "expected_sign": expected,
                     "sign_ok": bool(expected != 0 and np.sign(rho) == expected and p < 0.05),
                     "table": table}
        if out_dir is not None:
            d = Path(out_dir)
            d.mkdir(parents=True, exist_ok=True)
            table.to_csv(d / f"slice_{feat}.csv", index=False, float_format="%.8g")
            plotting.slice_figure(table, feat, d / f"slice_{feat}.svg")
    return out


# --------------------------------------------------------------------------
# Run context


@dataclass
class RunContext:
    config: RunConfig
    root: Path
    panel: LoggedPanel | None = None
    split: SplitIndex | None = None
    access: SplitAccess | None = None
    artifact: RepresentationArtifact | None = None
    nuisances: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    summary: pd.DataFrame | None = None
    outputs: dict = field(default_factory=dict)  # relative path -> producing stage
    results: dict = field(default_factory=dict)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def emit(self, rel: str, stage: str) -> Path:
        self.outputs[rel] = stage
        return self.root / rel

    # --- lazy loaders ----------------------------------------------------
    def load_panel(self) -> LoggedPanel:
        if self.panel is None:
            d = self.root / "data"
            if not (d / "panel.csv").exists():
                raise FileNotFoundError("no simulated panel; run the simulate stage first")
            meta = json.loads((d / "panel_meta.json").read_text())
            self.panel = LoggedPanel.from_csv(d / "panel.csv", d / "oracle.csv", d / "traces.npz",
                                              days=meta["days"], confounding_strength=meta["confounding_strength"])
        return self.panel

    def load_split(self) -> SplitAccess:
        if self.access is None:
            p = self.root / "split.json"
            if not p.exists():
                raise FileNotFoundError("no split; run the split stage first")
            self.split = SplitIndex.from_dict(json.loads(p.read_text()))
            self.access = SplitAccess(self.load_panel(), self.split)
        return self.access

    def load_artifact(self) -> RepresentationArtifact:
        if self.artifact is None:
            self.artifact = RepresentationArtifact.load(self.root / "artifacts" / "representation.json")
        return self.artifact

    def load_nuisances(self, scheme: str, history_weeks: int | None = None) -> Nuisances:
        h = history_weeks or self.config.history_weeks
        key = (scheme, h)
        if key not in self.nuisances:
            p = self.root / "artifacts" / f"nuisances_{scheme}_h{h}.json"
            self.nuisances[key] = Nuisances.from_dict(json.loads(p.read_text()))
        return self.nuisances[key]

    def load_model(self, cell: tuple[str, str, str]) -> CateModel:
        if cell not in self.models:
            self.models[cell] = CateModel.load(self.root / "models" / f"{_cell_name(cell)}.json")
        return self.models[cell]


def _cell_name(cell) -> str:
    return "__".join(cell)


def _cells(cfg: RunConfig) -> list[tuple[str, str, str]]:
    return [(m, s, me) for m in cfg.state_modes for s in cfg.action_schemes for me in cfg.methods]


@contextlib.contextmanager
def _stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - any failure aborts with the stage name
        raise StageError(name, e) from e


# --------------------------------------------------------------------------
# Stages


def stage_simulate(ctx: RunContext) -> None:
    cfg = ctx.config
    sim = SimConfig(reward_noise_sd=cfg.reward_noise_sd)
    cohort = sample_cohort(cfg.n_patients, cfg.seed)
    panel = simulate_panel(cohort, cfg.days, cfg.confounding_strength, cfg.seed, sim, workers=cfg.workers)
    ctx.panel = panel
    panel.to_csv(ctx.path("data/panel.csv"), ctx.path("data/oracle.csv"), ctx.path("data/traces.npz"))
    cohort_frame(cohort).to_csv(ctx.path("data/cohort.csv"), index=False, float_format="%.10g")
    _dump_json({"days": cfg.days, "confounding_strength": cfg.confounding_strength,
                "data_key": cfg.data_key(), "n_rows": len(panel)}, ctx.path("data/panel_meta.json"))
    for rel in ("data/panel.csv", "data/oracle.csv", "data/traces.npz", "data/cohort.csv", "data/panel_meta.json"):
        ctx.emit(rel, "simulate")


def stage_featurize(ctx: RunContext) -> None:
    cfg = ctx.config
    panel = ctx.load_panel()
    feats = panel.rows[["patient_id", "day", *FEATURE_NAMES]]
    feats.to_csv(ctx.path("features/clinical.csv"), index=False, float_format="%.10g")
    cov = build_control_covariates(panel, cfg.history_weeks)
    cdf = pd.DataFrame(cov.matrix, columns=list(cov.names))
    cdf.insert(0, "day", panel.rows["day"].to_numpy()[cov.rows])
    cdf.insert(0, "patient_id", panel.rows["patient_id"].to_numpy()[cov.rows])
    cdf.to_csv(ctx.path("features/control_covariates.csv"), index=False, float_format="%.10g")
    ctx.results["covariate_rows_dropped"] = int(cov.dropped)
    ctx.emit("features/clinical.csv", "featurize")
    ctx.emit("features/control_covariates.csv", "featurize")


def stage_split(ctx: RunContext) -> None:
    panel = ctx.load_panel()
    split = split_by_patient(panel.patient_ids, ctx.config.seed)
    _dump_json(split.to_dict(), ctx.path("split.json"))
    ctx.split = split
    ctx.access = SplitAccess(panel, split)
    ctx.emit("split.json", "split")


def _cache_key(cfg: RunConfig, cell, extra: dict | None = None) -> str:
    return _digest({"data": cfg.data_key(), "cell": list(cell), "history_weeks": cfg.history_weeks,
                    "top_k": cfg.top_k_features, "clip_floor": cfg.clip_floor,
                    "min_class_rows": cfg.min_class_rows, **(extra or {})})


def stage_fit(ctx: RunContext) -> None:
    cfg = ctx.config
    access = ctx.load_split()
    train = access.get("train", "fit")
    art = fit_state_artifact(train, cfg.state_modes, cfg.seed, cfg.top_k_features)
    art = fit_action_artifact(train, cfg.action_schemes, cfg.seed, art)
    ctx.artifact = art
    art.save(ctx.path("artifacts/representation.json"))
    ctx.emit("artifacts/representation.json", "fit")

    cov = build_control_covariates(train, cfg.history_weeks)
    y = train.rows["reward"].to_numpy()
    groups = train.rows["patient_id"].to_numpy()
    for scheme in cfg.action_schemes:
        A = action_classes(train, scheme, art)
        for h in sorted({cfg.history_weeks, *cfg.history_sweep}):
            c = cov if h == cfg.history_weeks else build_control_covariates(train, h)
            nu = fit_nuisances(c.matrix, A[c.rows], y[c.rows], len(ACTIONS), cfg.seed, cfg.clip_floor,
                               c.names, h, train.patient_ids, cfg.min_class_rows)
            ctx.nuisances[(scheme, h)] = nu
            rel = f"artifacts/nuisances_{scheme}_h{h}.json"
            _dump_json(nu.to_dict(), ctx.path(rel))
            ctx.emit(rel, "fit")

    cache = ctx.root / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    base = [m for m in cfg.methods if m != "ensemble"]
    for mode in cfg.state_modes:
        S_all, names = state_matrix(train, mode, art)
        for scheme in cfg.action_schemes:
            A = action_classes(train, scheme, art)
            jobs, keys = [], []
            for method in base:
                cell = (mode, scheme, method)
                key = _cache_key(cfg, cell)
                hit = cache / f"{key}.json"
                if hit.exists():
                    ctx.models[cell] = CateModel.from_dict(json.loads(hit.read_text()))
                    continue
                if method == "dr_forest":
                    args = (method, S_all[cov.rows], A[cov.rows], y[cov.rows], groups[cov.rows], cov.matrix)
                else:
                    args = (method, S_all, A, y, groups, None)
                jobs.append(args + (cfg.seed, cfg.clip_floor, mode, scheme, names, cfg.min_class_rows))
                keys.append((cell, hit))
            if cfg.workers > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
                    done = list(ex.map(_fit_cell, jobs))
            else:
                done = [_fit_cell(j) for j in jobs]
            for (cell, hit), d in zip(keys, done):
                hit.write_text(json.dumps(d, sort_keys=True))
                ctx.models[cell] = CateModel.from_dict(d)
            if "ensemble" in cfg.methods:
                cell = (mode, scheme, "ensemble")
                key = _cache_key(cfg, cell, {"members": base})
                hit = cache / f"{key}.json"
                if hit.exists():
                    ctx.models[cell] = CateModel.from_dict(json.loads(hit.read_text()))
                else:
                    ctx.models[cell] = _fit_cell_ensemble(ctx, mode, scheme, base)
                    hit.write_text(json.dumps(ctx.models[cell].to_dict(), sort_keys=True))
    for cell, model in ctx.models.items():
        rel = f"models/{_cell_name(cell)}.json"
        model.save(ctx.path(rel))
        ctx.emit(rel, "fit")


def _fit_cell_ensemble(ctx: RunContext, mode: str, scheme: str, base: list[str]) -> CateModel:
    """Ensemble weights from validation rows that are not evaluation days.

    Keeping the evaluation days out of the weight fit means the validation
    TOC of the ensemble is not scored on the rows its weights were tuned on.
    """
    cfg = ctx.config
    val = ctx.access.get("validation", "fit")
    art = ctx.artifact
    ev = set(evaluation_rows(val, cfg.eval_stride).tolist())
    nu = ctx.nuisances[(scheme, cfg.history_weeks)]
    cov = build_control_covariates(val, cfg.history_weeks)
    rows = np.array([r for r in cov.rows if r not in ev], dtype=int)
    if rows.size == 0:
        rows = cov.rows
    dr = panel_dr_scores(val, action_classes(val, scheme, art), nu, rows=rows)
    S, _ = state_matrix(val, mode, art)
    members = [ctx.models[(mode, scheme, m)] for m in base]
    model = fit_ensemble(members, S[rows], dr)
    model.state_mode, model.action_scheme = mode, scheme
    return model


def _eval_cell(ctx: RunContext, cell, part: str, stage: str, history_weeks: int | None = None,
               seed_offset: int = 0) -> tuple[TocReport, float | None, np.ndarray]:
    cfg = ctx.config
    mode, scheme, _ = cell
    panel = ctx.access.get(part, stage)
    art = ctx.load_artifact()
    model = ctx.load_model(cell)
    h = history_weeks or cfg.history_weeks
    nu = ctx.load_nuisances(scheme, h)
    ev = evaluation_rows(panel, cfg.eval_stride)
    first_day = 7 * max([cfg.history_weeks, *cfg.history_sweep]) if history_weeks else 0
    ev = ev[panel.rows["day"].to_numpy()[ev] >= max(first_day, 7 * h)]
    assert_disjoint(model.train_patients, panel.rows["patient_id"].to_numpy()[ev], "CATE model")
    dr = panel_dr_scores(panel, action_classes(panel, scheme, art), nu, rows=ev)
    S, _ = state_matrix(panel, mode, art)
    tau_hat = model.predict(S[ev])
    rep = toc_curve(tau_hat, dr, cfg.grid, cfg.bootstrap, cfg.seed + seed_offset, cfg.level)
    rep.metadata = {"cell": list(cell), "split": part, "rows": int(ev.size),
                    "patients": int(np.unique(dr.patient_id).size), "history_weeks": h,
                    "seed": cfg.seed, "config_hash": cfg.hash()}
    regret = None
    if panel.oracle is not None:
        ref = ctx.access.get("train", stage) if scheme != "clinical_rules" else None
        true_tau = scheme_true_effects(panel.subset(ev), scheme, art, ref)
        regret = cell_regret(true_tau, tau_hat, dr.patient_id, dr.day, 0.25, cfg.skip_negative_scores)
    return rep, regret, ev


def stage_evaluate(ctx: RunContext) -> None:
    cfg = ctx.config
    access = ctx.load_split()
    rows = []
    for cell in _cells(cfg):
        rep, regret, _ = _eval_cell(ctx, cell, "validation", "evaluate")
        ctx.reports[cell] = rep
        rel = f"cells/{_cell_name(cell)}.json"
        rep.to_json(ctx.path(rel))
        ctx.emit(rel, "evaluate")
        rel_csv = f"cells/{_cell_name(cell)}.csv"
        rep.to_frame().to_csv(ctx.path(rel_csv), index=False, float_format="%.10g")
        ctx.emit(rel_csv, "evaluate")
        hw = rep.half_width(0.25)
        rows.append({
            "state_mode": cell[0], "action_scheme": cell[1], "method": cell[2],
            "att25": rep.att25, "att25_low": rep.att25_ci[0], "att25_high": rep.att25_ci[1],
            "baseline_action": rep.baseline_action, "baseline": rep.baseline,
            "baseline_low": rep.baseline_ci[0], "baseline_high": rep.baseline_ci[1],
            "margin_in_half_widths": (rep.att25 - rep.baseline) / hw if hw > 0 else np.nan,
            "autoc": rep.autoc, "autoc_low": rep.autoc_ci[0], "autoc_high": rep.autoc_ci[1],
            "oracle_regret": np.nan if regret is None else regret,
        })
    summary = pd.DataFrame(rows)
    ctx.summary = summary
    summary.to_csv(ctx.path("summary.csv"), index=False, float_format="%.10g")
    ctx.emit("summary.csv", "evaluate")

    order = summary.sort_values(["att25", "state_mode", "action_scheme", "method"],
                                ascending=[False, True, True, True], kind="mergesort")
    best = tuple(order.iloc[0][["state_mode", "action_scheme", "method"]])
    ctx.results["best_cell"] = list(best)

    test_rep, test_regret, _ = _eval_cell(ctx, best, "test", TEST_STAGE, seed_offset=1)
    test_rep.to_json(ctx.path("test_report.json"))
    ctx.emit("test_report.json", "evaluate")
    ctx.results["test"] = {"cell": list(best), "att25": test_rep.att25, "att25_ci": list(test_rep.att25_ci),
                           "summary": test_rep.summary(), "autoc": test_rep.autoc,
                           "oracle_regret": test_regret}
    ctx.reports[("test",) + best] = test_rep

    if cfg.history_sweep:
        hist = []
        for h in sorted(set(cfg.history_sweep)):
            rep, _, ev = _eval_cell(ctx, best, "validation", "evaluate", history_weeks=h)
            hist.append({"history_weeks": h, "att25": rep.att25, "att25_low": rep.att25_ci[0],
                         "att25_high": rep.att25_ci[1], "half_width": rep.half_width(), "rows": int(ev.size)})
        hdf = pd.DataFrame(hist)
        hdf.to_csv(ctx.path("history_sensitivity.csv"), index=False, float_format="%.10g")
        ctx.emit("history_sensitivity.csv", "evaluate")
    access.assert_test_isolated()


def stage_report(ctx: RunContext) -> None:
    cfg = ctx.config
    access = ctx.load_split()
    if ctx.summary is None:
        ctx.summary = pd.read_csv(ctx.root / "summary.csv")
    summary = ctx.summary
    plotting.att_grid_figure(summary, ctx.path("figures/att25_grid.svg"))
    ctx.emit("figures/att25_grid.svg", "report")
    for scheme in cfg.action_schemes:
        for mode in cfg.state_modes:
            reps = {}
            for method in cfg.methods:
                cell = (mode, scheme, method)
                rep = ctx.reports.get(cell) or TocReport.from_dict(
                    json.loads((ctx.root / "cells" / f"{_cell_name(cell)}.json").read_text()))
                reps[method] = rep
            rel = f"figures/toc_{mode}__{scheme}.svg"
            plotting.toc_overlay_figure(reps, ctx.path(rel), title=f"{mode} / {scheme}")
            ctx.emit(rel, "report")
    best = tuple(ctx.results.get("best_cell") or
                 summary.sort_values("att25", ascending=False, kind="mergesort").iloc[0][
                     ["state_mode", "action_scheme", "method"]])
    test_rep = TocReport.from_dict(json.loads((ctx.root / "test_report.json").read_text()))
    plotting.toc_figure(test_rep, ctx.path("figures/toc_test_best.svg"), title="held-out test, " + " / ".join(best))
    ctx.emit("figures/toc_test_best.svg", "report")

    val = access.get("validation", "report")
    art = ctx.load_artifact()
    ev = evaluation_rows(val, cfg.eval_stride)
    S, _ = state_matrix(val, best[0], art)
    slices = report_cate_slices(ctx.load_model(best), val, S[ev], cfg.slice_features,
                                ctx.path("slices/x").parent, rows=ev)
    for feat in cfg.slice_features:
        ctx.emit(f"slices/slice_{feat}.csv", "report")
        ctx.emit(f"slices/slice_{feat}.svg", "report")
    sign = {f: {k: v for k, v in d.items() if k != "table"} for f, d in slices.items()}
    _dump_json(sign, ctx.path("slices/sign_tests.json"))
    ctx.emit("slices/sign_tests.json", "report")
    ctx.results["slice_sign_tests"] = sign

    hist = ctx.root / "history_sensitivity.csv"
    if cfg.history_sweep and hist.exists():
        plotting.history_figure(pd.read_csv(hist), ctx.path("figures/history_sensitivity.svg"))
        ctx.emit("figures/history_sensitivity.svg", "report")
    access.assert_test_isolated()


STAGE_FUNCS = {"simulate": stage_simulate, "featurize": stage_featurize, "split": stage_split,
               "fit": stage_fit, "evaluate": stage_evaluate, "report": stage_report}


def _write_manifest(ctx: RunContext) -> dict:
    prev = ctx.root / "run_report.json"
    outputs = dict(ctx.outputs)
    if prev.exists():
        # stages run separately: keep earlier entries whose files still exist
        for rel, info in json.loads(prev.read_text()).get("manifest", {}).items():
            if rel not in outputs and (ctx.root / rel).exists():
                outputs[rel] = info["stage"]
    manifest = {rel: {"stage": stage, "sha256": sha256_file(ctx.root / rel)}
                for rel, stage in sorted(outputs.items()) if (ctx.root / rel).exists()}
    access = ctx.access
    report = {
        "config": ctx.config.to_dict(),
        "config_hash": ctx.config.hash(),
        "manifest": manifest,
        "split_access": {} if access is None else {p: access.stages_reading(p)
                                                   for p in ("train", "validation", "test")},
        "results": ctx.results,
    }
    _dump_json(report, prev)
    return report


def run_pipeline(config: RunConfig, stages=STAGES) -> dict:
    """Run the given stages in order and return the run report."""
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stage(s) {bad}")
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(config, root)
    prev = root / "run_report.json"
    if prev.exists():
        ctx.results.update(json.loads(prev.read_text()).get("results", {}))
    for name in STAGES:
        if name in stages:
            with _stage(name):
                STAGE_FUNCS[name](ctx)
    return _write_manifest(ctx)


def default_workers() -> int:
    return max(1, int(os.environ.get("RPMPOLICY_WORKERS", "1")))


__all__ = ["ConfigError", "RunConfig", "RunContext", "SLICE_DIRECTIONS", "SLICE_FEATURES", "STAGES",
           "SplitAccess", "StageError", "cell_regret", "fit_cate", "report_cate_slices", "run_pipeline",
           "scheme_true_effects", "sha256_file"]
