"""State and action representations.

State maps turn a patient-day into a vector: the full clinical battery, a
learned subset, the clinician dashboard subset, or a random projection of
the raw trace window.  Action maps turn a logged message into a discrete
class: clinical rules over message labels, or K-means on the embedding.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .features import FEATURE_NAMES, SLOTS_PER_DAY, WINDOW_DAYS, WINDOW_SLOTS
from .learners.boosting import BoostConfig, fit_regressor, permutation_importance
from .simulate import ACTION_IDS, ACTIONS, CONTROL, EMBEDDING_NAMES, LABEL_NAMES, LoggedPanel

STATE_MODES = ("full", "ml_subset", "tide", "blackbox")
ACTION_SCHEMES = ("clinical_rules", "kmeans")

TIDE_FEATURES = (
    "very_low_7dr", "low_7dr", "in_range_7dr", "g_7dr", "using_pump", "in_range_7dr_7d_delta",
    "large_tir_drop", "low_tir", "lows", "very_lows", "pop_4T_1", "pop_4T_2", "pop_TIPS",
)
BLACKBOX_DIM = 8
BLACKBOX_NAMES = tuple(f"proj_{j}" for j in range(BLACKBOX_DIM))
N_MESSAGE_CLASSES = len(ACTIONS) - 1


class MissingArtifactError(LookupError):
    """A representation mode needs a fitted artifact that was not supplied."""


# --------------------------------------------------------------------------
# State


@dataclass(frozen=True)
class StateRep:
    mode: str
    feature_names: tuple[str, ...]
    vector: np.ndarray

    def __post_init__(self):
        if self.mode not in STATE_MODES:
            raise ValueError(f"unknown state mode {self.mode!r}")
        if len(self.feature_names) != len(self.vector):
            raise ValueError("vector length does not match feature names")


@dataclass
class RepresentationArtifact:
    """Everything fitted on the training split that a representation needs."""

    seed: int
    ml_subset: tuple[str, ...] | None = None
    projection: np.ndarray | None = None  # (4032, 8)
    kmeans: "KMeansModel | None" = None
    importances: dict[str, float] = field(default_factory=dict)

    def state_names(self, mode: str) -> tuple[str, ...]:
        if mode == "full":
            return FEATURE_NAMES
        if mode == "tide":
            return TIDE_FEATURES
        if mode == "ml_subset":
            if self.ml_subset is None:
                raise MissingArtifactError("ml_subset mode needs a selected feature subset")
            return self.ml_subset
        if mode == "blackbox":
            if self.projection is None:
                raise MissingArtifactError("blackbox mode needs a fitted projection")
            return BLACKBOX_NAMES
        raise ValueError(f"unknown state mode {mode!r}")

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "seed": self.seed,
            "ml_subset": None if self.ml_subset is None else list(self.ml_subset),
            "projection": None if self.projection is None else self.projection.tolist(),
            "kmeans": None if self.kmeans is None else self.kmeans.to_dict(),
            "importances": self.importances,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RepresentationArtifact":
        return cls(
            seed=d["seed"],
            ml_subset=None if d["ml_subset"] is None else tuple(d["ml_subset"]),
            projection=None if d["projection"] is None else np.asarray(d["projection"], dtype=float),
            kmeans=None if d["kmeans"] is None else KMeansModel.from_dict(d["kmeans"]),
            importances=d.get("importances", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "RepresentationArtifact":
        return cls.from_dict(json.loads(Path(path).read_text()))


def random_projection(seed: int, dim: int = BLACKBOX_DIM) -> np.ndarray:
    """Gaussian projection matrix (4032 x dim) with unit-variance outputs per unit-variance slot."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 404]))
    return rng.standard_normal((WINDOW_SLOTS, dim)) / np.sqrt(WINDOW_SLOTS)


def project_windows(windows: np.ndarray, projection: np.ndarray, center: bool = True) -> np.ndarray:
    """Project (n, 4032) windows after filling missing slots with the window mean.

    With ``center`` the window mean is subtracted first, so the projection
    sees the shape of the trace but not its overall glucose level.
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=float))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(windows, axis=1, keepdims=True)
    if np.isnan(mean).any():
        raise ValueError("window with no readings cannot be projected")
    filled = np.where(np.isnan(windows), mean, windows)
    if center:
        filled = filled - mean
    return filled @ projection


def state_representation(features, mode: str, artifact: RepresentationArtifact | None = None,
                         trace=None) -> StateRep:
    """Representation of one patient-day.

    ``features`` is a ClinicalFeatures or mapping; blackbox mode also needs
    ``trace``, the 4032-slot window ending at the decision day.
    """
    if mode == "blackbox":
        if artifact is None or artifact.projection is None:
            raise MissingArtifactError("blackbox mode needs a fitted projection")
        if trace is None:
            raise ValueError("blackbox mode needs the trace window")
        readings = getattr(trace, "readings", trace)
        vec = project_windows(np.asarray(readings, dtype=float)[None, :], artifact.projection)[0]
        return StateRep(mode, BLACKBOX_NAMES, vec)
    if mode == "ml_subset":
        if artifact is None:
            raise MissingArtifactError("ml_subset mode needs a selected feature subset")
        names = artifact.state_names(mode)
    elif mode in ("full", "tide"):
        names = FEATURE_NAMES if mode == "full" else TIDE_FEATURES
    else:
        raise ValueError(f"unknown state mode {mode!r}")
    vec = np.array([float(features[n]) for n in names])
    return StateRep(mode, tuple(names), vec)


def panel_windows(panel: LoggedPanel, rows: np.ndarray | None = None) -> np.ndarray:
    """Stack the trace windows for the given panel rows, shape (n, 4032)."""
    rows = np.arange(len(panel)) if rows is None else np.asarray(rows)
    pid = panel.rows["patient_id"].to_numpy()[rows]
    day = panel.rows["day"].to_numpy()[rows]
    out = np.empty((rows.size, WINDOW_SLOTS), dtype=np.float32)
    for i, (p, d) in enumerate(zip(pid, day)):
        out[i] = panel.traces[int(p)][(d - WINDOW_DAYS) * SLOTS_PER_DAY: d * SLOTS_PER_DAY]
    return out


def state_matrix(panel: LoggedPanel, mode: str,
                 artifact: RepresentationArtifact | None = None) -> tuple[np.ndarray, tuple[str, ...]]:
    """State representation for every panel row as an (n, d) matrix."""
    if mode == "blackbox":
        if artifact is None or artifact.projection is None:
            raise MissingArtifactError("blackbox mode needs a fitted projection")
        out = np.empty((len(panel), BLACKBOX_DIM))
        for start in range(0, len(panel), 4096):
            rows = np.arange(start, min(start + 4096, len(panel)))
            out[rows] = project_windows(panel_windows(panel, rows), artifact.projection)
        return out, BLACKBOX_NAMES
    if mode == "ml_subset" and artifact is None:
        raise MissingArtifactError("ml_subset mode needs a selected feature subset")
    names = artifact.state_names(mode) if artifact is not None else (
        FEATURE_NAMES if mode == "full" else TIDE_FEATURES if mode == "tide" else None)
    if names is None:
        raise ValueError(f"unknown state mode {mode!r}")
    return panel.rows[list(names)].to_numpy(dtype=float), tuple(names)


def select_state_features(train_panel: LoggedPanel, top_k: int = 14, seed: int = 0,
                          config: BoostConfig | None = None) -> tuple[tuple[str, ...], dict[str, float]]:
    """Top features by permutation importance of a boosted reward model.

    Returns the ordered subset and the importance of every feature.  Ties
    keep the column order of the full feature list.
    """
    names = FEATURE_NAMES
    if not 1 <= top_k <= len(names):
        raise ValueError(f"top_k must be in [1, {len(names)}], got {top_k}")
    X = train_panel.rows[list(names)].to_numpy(dtype=float)
    y = train_panel.rows["reward"].to_numpy(dtype=float)
    model = fit_regressor(X, y, config, seed=seed)
    imp = permutation_importance(model.predict, X, y, seed=seed)
    order = sorted(range(len(names)), key=lambda j: (-imp[j], j))
    subset = tuple(names[j] for j in order[:top_k])
    return subset, {n: float(v) for n, v in zip(names, imp)}


def fit_state_artifact(train_panel: LoggedPanel, modes, seed: int = 0, top_k: int = 14,
                       artifact: RepresentationArtifact | None = None) -> RepresentationArtifact:
    art = artifact or RepresentationArtifact(seed=seed)
    if "ml_subset" in modes and art.ml_subset is None:
        art.ml_subset, art.importances = select_state_features(train_panel, top_k, seed)
    if "blackbox" in modes and art.projection is None:
        art.projection = random_projection(seed)
    return art


# --------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class ActionRep:
    scheme: str
    class_id: int
    k: int = N_MESSAGE_CLASSES

    def __post_init__(self):
        if self.scheme not in ACTION_SCHEMES:
            raise ValueError(f"unknown action scheme {self.scheme!r}")
        if not 0 <= self.class_id <= self.k:
            raise ValueError("class id out of range")


_L = {n: j for j, n in enumerate(LABEL_NAMES)}


def clinical_classes(labels, sent) -> np.ndarray:
    """Vectorised clinical-rule classes; ``labels`` is (n, 11), ``sent`` is (n,)."""
    labels = np.atleast_2d(np.asarray(labels, dtype=bool))
    sent = np.asarray(sent, dtype=bool).reshape(-1)
    low = labels[:, _L["recommendations_target_low_glucose"]]
    high = (labels[:, _L["recommendations_target_high_glucose_or_low_time_in_range"]]
            | labels[:, _L["recommends_more_correction_doses"]]
            | labels[:, _L["reminds_patient_to_bolus"]])
    out = np.full(labels.shape[0], ACTION_IDS["other"])
    out[low & high] = ACTION_IDS["highs_and_lows"]
    out[~low & high] = ACTION_IDS["highs_only"]
    out[low & ~high] = ACTION_IDS["lows_only"]
    out[~sent] = CONTROL
    return out


def action_representation_clinical(labels, sent: bool = True) -> ActionRep:
    """Clinical class of one message from its 11 boolean labels (dict or sequence)."""
    if isinstance(labels, dict):
        labels = [bool(labels.get(n, False)) for n in LABEL_NAMES]
    return ActionRep("clinical_rules", int(clinical_classes([labels], [sent])[0]))


@dataclass
class KMeansModel:
    centroids: np.ndarray
    seed: int
    inertia: float
    inertia_path: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, embeddings) -> np.ndarray:
        """Nearest centroid index (0-based); ties go to the lowest index."""
        E = np.atleast_2d(np.asarray(embeddings, dtype=float))
        d2 = ((E[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)

    def to_dict(self) -> dict:
        return {"centroids": self.centroids.tolist(), "seed": self.seed,
                "inertia": self.inertia, "inertia_path": self.inertia_path}

    @classmethod
    def from_dict(cls, d: dict) -> "KMeansModel":
        return cls(np.asarray(d["centroids"], dtype=float), d["seed"], d["inertia"],
                   list(d.get("inertia_path", [])))


def fit_kmeans(embeddings, k: int = N_MESSAGE_CLASSES, seed: int = 0, max_iter: int = 50,
               tol: float = 1e-6) -> KMeansModel:
    """Lloyd iterations from k-means++ seeding."""
    E = np.asarray(embeddings, dtype=float)
    n = E.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, E.shape[1]))
    centroids[0] = E[rng.integers(n)]
    d2 = ((E - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids[j] = E[idx]
        d2 = np.minimum(d2, ((E - centroids[j]) ** 2).sum(axis=1))

    path = []
    model = KMeansModel(centroids, seed, np.inf)
    for _ in range(max_iter):
        lab = model.assign(E)
        inertia = float(((E - centroids[lab]) ** 2).sum())
        path.append(inertia)
        new = centroids.copy()
        for j in range(k):
            members = lab == j
            if members.any():
                new[j] = E[members].mean(axis=0)
        shift = float(np.abs(new - centroids).max())
        centroids = new
        model = KMeansModel(centroids, seed, inertia)
        if shift <= tol:
            break
    lab = model.assign(E)
    inertia = float(((E - centroids[lab]) ** 2).sum())
    path.append(inertia)
    return KMeansModel(centroids, seed, inertia, path)


def assign(model: KMeansModel, embedding) -> int:
    """Action class id (1..k) of one message embedding."""
    return int(model.assign(embedding)[0]) + 1


def action_classes(panel: LoggedPanel, scheme: str,
                   artifact: RepresentationArtifact | None = None) -> np.ndarray:
    """Action class id for every panel row under the given scheme (0 = control)."""
    sent = panel.rows["action_class"].to_numpy() != CONTROL
    if scheme == "clinical_rules":
        return clinical_classes(panel.rows[list(LABEL_NAMES)].to_numpy(dtype=bool), sent)
    if scheme == "kmeans":
        if artifact is None or artifact.kmeans is None:
            raise MissingArtifactError("kmeans scheme needs fitted centroids")
        out = np.zeros(len(panel), dtype=int)
        if sent.any():
            E = panel.rows.loc[sent, list(EMBEDDING_NAMES)].to_numpy(dtype=float)
            out[sent] = artifact.kmeans.assign(E) + 1
        return out
    raise ValueError(f"unknown action scheme {scheme!r}")


def fit_action_artifact(train_panel: LoggedPanel, schemes, seed: int = 0,
                        artifact: RepresentationArtifact | None = None) -> RepresentationArtifact:
    art = artifact or RepresentationArtifact(seed=seed)
    if "kmeans" in schemes and art.kmeans is None:
        sent = train_panel.rows["action_class"].to_numpy() != CONTROL
        E = train_panel.rows.loc[sent, list(EMBEDDING_NAMES)].to_numpy(dtype=float)
        art.kmeans = fit_kmeans(E, N_MESSAGE_CLASSES, seed)
    return art


def representation_frame(panel: LoggedPanel, mode: str, scheme: str,
                         artifact: RepresentationArtifact | None) -> pd.DataFrame:
    """Ids, day, reward, represented action and state columns in one frame."""
    S, names = state_matrix(panel, mode, artifact)
    df = pd.DataFrame(S, columns=list(names))
    df.insert(0, "action", action_classes(panel, scheme, artifact))
    df.insert(0, "reward", panel.rows["reward"].to_numpy())
    df.insert(0, "day", panel.rows["day"].to_numpy())
    df.insert(0, "patient_id", panel.rows["patient_id"].to_numpy())
    return df
