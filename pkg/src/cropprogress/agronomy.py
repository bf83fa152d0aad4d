"""Stage-completion requirements and transition-time arithmetic.

Consecutive threshold gaps on the link scale are the development a crop must
accumulate to complete a stage transition.  Combined with the fitted
calendar and thermal-time slopes (converted back to raw per-day units via
the stored standardization scales) they answer two planning questions: how
many days a transition takes under a constant daily GDD rate, and what rate
meets a target number of days.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DataError
from .features import gdd as daily_gdd


@dataclass(frozen=True)
class Requirement:
    """Link-scale development needed to move between consecutive stages."""

    from_stage: str
    to_stage: str
    delta: float
    season: int | None = None

    @property
    def magnitude(self):
        return abs(self.delta)


def _season_intercepts(model, season):
    if season is None:
        return None
    effects = getattr(model, "random_intercepts_", None)
    if effects is None or not effects:
        raise DataError(
            "season-specific requirements need a mixed model with seasonal "
            "random intercepts"
        )
    if int(season) not in effects:
        raise DataError(
            f"season {season} was not in the training data; no predicted "
            "random effects are available"
        )
    return effects[int(season)]


def requirements(model, season=None):
    """Stage-completion requirements from a fitted model's thresholds.

    With ``season`` given (mixed models only) the season's predicted random
    intercepts are added to the thresholds before differencing.
    """
    thresholds = np.asarray(model.thresholds_, dtype=float)
    offsets = _season_intercepts(model, season)
    if offsets is not None:
        thresholds = thresholds + np.asarray(offsets, dtype=float)
    stages = model.scheme_.stages
    out = []
    for j in range(1, thresholds.size):
        out.append(
            Requirement(
                from_stage=stages[j - 1],
                to_stage=stages[j],
                delta=float(thresholds[j] - thresholds[j - 1]),
                season=None if season is None else int(season),
            )
        )
    return out


def _requirement_for(model, stage, season):
    stages = model.scheme_.stages
    if isinstance(stage, str):
        if stage not in stages:
            raise DataError(f"unknown stage {stage!r}; have {list(stages)}")
        j = stages.index(stage)
    else:
        j = int(stage)
    if j < 1 or j >= len(stages):
        raise DataError(
            f"no transition requirement for stage {stage!r}; transitions "
            f"exist into {list(stages[1:])}"
        )
    return requirements(model, season)[j - 1], j


def _raw_slopes(model, stage_index, season):
    """Calendar/thermal slopes per raw unit (day, GDD).

    Standardized coefficients are divided by the stored standardization
    scales; emitting day units without those scales would be silently wrong,
    so their absence is an error.  For mixed models with stage-level random
    slopes and an explicit season, the target stage's predicted slope
    effects are included (individual-level calculation).
    """
    std = getattr(model, "standardization_", None)
    if std is None:
        raise DataError(
            "the model artifact carries no standardization scales; "
            "transition times in day units cannot be derived"
        )
    slopes = dict(model.ordinal_slopes_)
    if "calendar" not in slopes:
        raise DataError("the model has no ordinal calendar-time slope")
    random_slopes = getattr(model, "random_slopes_", {}) or {}
    out = {}
    for cov in ("calendar", "thermal"):
        if cov not in slopes:
            out[cov] = 0.0
            continue
        value = slopes[cov]
        if season is not None and cov in random_slopes:
            value = value + float(random_slopes[cov][stage_index - 1])
        out[cov] = value / std.sds[cov]
    return out["calendar"], out["thermal"]


def transition_time(model, stage, gdd_rate=None, season=None, weather=None,
                    cardinals=None):
    """Days to complete the transition into ``stage``.

    Constant-rate mode (``gdd_rate``): the requirement is covered at
    ``beta_cal_raw + gdd_rate * beta_thermal_raw`` link units per day, a
    constant-conditions assumption stated in the output of the CLI.
    Variable-rate mode (``weather`` + ``cardinals``): daily GDD is
    accumulated from the start of the supplied series until the requirement
    is met, interpolating within the crossing day.
    """
    requirement, j = _requirement_for(model, stage, season)
    beta_cal, beta_thermal = _raw_slopes(model, j + 1, season)
    target = requirement.magnitude

    if (gdd_rate is None) == (weather is None):
        raise DataError("give exactly one of gdd_rate or weather")

    if gdd_rate is not None:
        if not (0.0 <= gdd_rate <= 1.0):
            raise DataError("gdd_rate must lie in [0, 1]")
        rate_per_day = beta_cal + gdd_rate * beta_thermal
        if rate_per_day <= 0:
            raise DataError("development rate non-positive under the given conditions")
        return target / rate_per_day

    if cardinals is None:
        raise DataError("variable-rate mode needs the cardinal temperatures")
    credits = daily_gdd(weather.tmin, weather.tmax, cardinals)
    development = 0.0
    for day_count, credit in enumerate(np.atleast_1d(credits), start=1):
        step = beta_cal + float(credit) * beta_thermal
        if development + step >= target:
            if step <= 0:
                raise DataError("development rate non-positive under the given conditions")
            return day_count - 1 + (target - development) / step
        development += step
    raise DataError(
        f"requirement {target:.4g} not met within the {np.atleast_1d(credits).size} "
        "supplied weather days"
    )


def required_gdd_rate(model, stage, target_days, season=None):
    """Constant daily GDD rate meeting a target transition time.

    Inverts the constant-rate transition-time formula; a solution outside
    [0, 1] is infeasible because daily GDD is bounded.
    """
    if target_days <= 0:
        raise DataError("target_days must be positive")
    requirement, j = _requirement_for(model, stage, season)
    beta_cal, beta_thermal = _raw_slopes(model, j + 1, season)
    if beta_thermal == 0.0:
        raise DataError(
            "the thermal-time slope is zero; the GDD rate cannot influence timing"
        )
    rate = (requirement.magnitude / target_days - beta_cal) / beta_thermal
    if not (0.0 <= rate <= 1.0):
        raise DataError(
            f"target of {target_days:g} days is infeasible: it needs a daily "
            f"GDD rate of {rate:.4g}, outside [0, 1]"
        )
    return rate
