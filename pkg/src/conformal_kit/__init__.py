"""Distribution-free uncertainty quantification with conformal prediction."""

from .calibrate import (
    Calibration,
    ConformalBand,
    PredictionSet,
    band_interval,
    band_normalized,
    band_point,
    critical_score,
    p_value,
    predict_set,
    smoothed_p_value,
)
from .core import (
    ConfigError,
    ConformalError,
    DataError,
    Dataset,
    NumericError,
    SeededRng,
    empirical_quantile,
    lower_quantile,
    split,
)
from .scores import RegressionOutputs

__version__ = "0.1.0"

__all__ = [
    "Calibration",
    "ConformalBand",
    "PredictionSet",
    "band_interval",
    "band_normalized",
    "band_point",
    "critical_score",
    "p_value",
    "predict_set",
    "smoothed_p_value",
    "ConfigError",
    "ConformalError",
    "DataError",
    "Dataset",
    "NumericError",
    "SeededRng",
    "empirical_quantile",
    "lower_quantile",
    "split",
    "RegressionOutputs",
]
