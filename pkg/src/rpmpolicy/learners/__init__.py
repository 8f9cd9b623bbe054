"""Tree-based base learners and effect estimators."""
from .boosting import (
    BinaryBooster,
    BoostConfig,
    InsufficientSupportError,
    PropensityModel,
    Regressor,
    clip_and_renormalize,
    fit_propensity,
    fit_regressor,
    permutation_importance,
)
from .cate import METHODS, CateModel, TableCate, fit_cate_arrays, fit_ensemble
from .forest import (
    ForestConfig,
    HonestCausalForest,
    RegressionForest,
    fit_causal_forest,
    fit_regression_forest,
)

__all__ = [
    "METHODS", "BinaryBooster", "BoostConfig", "CateModel", "ForestConfig", "HonestCausalForest",
    "InsufficientSupportError", "PropensityModel", "RegressionForest", "Regressor", "TableCate",
    "clip_and_renormalize", "fit_cate_arrays", "fit_causal_forest", "fit_ensemble",
    "fit_propensity", "fit_regression_forest", "fit_regressor", "permutation_importance",
]
