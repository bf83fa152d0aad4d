"""Crop progress modeling with cumulative link models.

The package turns weekly crop-progress surveys and daily weather/reflectance
series into fitted cumulative link models (fixed or mixed effects), evaluates
them with Monte-Carlo cross-validation, and converts fitted thresholds into
agronomic stage-completion requirements.
"""

__version__ = "0.1.0"

from .dataset import (
    ModelingTable,
    ProgressPanel,
    ReflectanceSeries,
    StageScheme,
    WeatherSeries,
    join_panel,
    load_progress,
    load_reflectance,
    load_weather,
    write_progress,
)
from .estimation import CumulativeLinkModel, PredictedProgress, load_model
from .evaluation import CvPlan, CvReport, monte_carlo_cv, rmspe, selection_grid
from .exceptions import DataError, FitError
from .features import (
    SETTINGS,
    CardinalTemperatures,
    FeatureFrame,
    StandardizationParams,
    build_features,
    gdd,
    greenup,
    ndvi,
    standardize,
    thermal_time,
    whittaker_smooth,
)
from .links import LINKS, get_link
from .mixed import MixedCumulativeLinkModel, laplace_logdensity
from .presets import CROP_PRESETS, crop_preset
from .agronomy import Requirement, required_gdd_rate, requirements, transition_time
from .simulate import SimConfig, SimResult, simulate

__all__ = [
    "CROP_PRESETS",
    "CardinalTemperatures",
    "CumulativeLinkModel",
    "CvPlan",
    "CvReport",
    "DataError",
    "FeatureFrame",
    "FitError",
    "LINKS",
    "MixedCumulativeLinkModel",
    "ModelingTable",
    "PredictedProgress",
    "ProgressPanel",
    "ReflectanceSeries",
    "Requirement",
    "SETTINGS",
    "SimConfig",
    "SimResult",
    "StageScheme",
    "StandardizationParams",
    "WeatherSeries",
    "build_features",
    "crop_preset",
    "gdd",
    "get_link",
    "greenup",
    "join_panel",
    "laplace_logdensity",
    "load_model",
    "load_progress",
    "load_reflectance",
    "load_weather",
    "monte_carlo_cv",
    "ndvi",
    "required_gdd_rate",
    "requirements",
    "rmspe",
    "selection_grid",
    "simulate",
    "standardize",
    "thermal_time",
    "transition_time",
    "whittaker_smooth",
    "write_progress",
]
