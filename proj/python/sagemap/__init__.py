"""SAGE phase-map and property-map inference."""

from ._sage import (
    ConfigError,
    DataError,
    FileError,
    InferenceError,
    NumericalError,
    accuracy,
    case_names,
    fit,
    gp_changepoint,
    gp_classification,
    gp_regression,
    main,
    permutation_accuracy,
    r_squared,
    synthetic_case,
    truth,
    wasserstein_1d,
)

__all__ = [
    "ConfigError",
    "DataError",
    "FileError",
    "InferenceError",
    "NumericalError",
    "accuracy",
    "case_names",
    "fit",
    "gp_changepoint",
    "gp_classification",
    "gp_regression",
    "main",
    "permutation_accuracy",
    "r_squared",
    "synthetic_case",
    "truth",
    "wasserstein_1d",
]
