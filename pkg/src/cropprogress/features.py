"""Predictive feature construction: thermal time, greenup, standardization.

Daily growing degree days weight each day's truncated average temperature by
a normalized triangular density over the crop's cardinal temperatures, so a
day contributes development credit in [0, 1].  Thermal time accumulates that
credit within a season.  Greenup mirrors the construction for NDVI: cloud
gaps are filled by a first-order Whittaker smoother and the smoothed index is
accumulated within the season.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

from ._validation import check_finite, freeze_array
from .exceptions import DataError

#: Covariates used by each model setting, in design order.
SETTINGS = {
    "calendar": ("calendar",),
    "thermal": ("calendar", "thermal"),
    "greenup": ("calendar", "greenup"),
    "combined": ("calendar", "thermal", "ndvi"),
}


def setting_covariates(setting):
    try:
        return SETTINGS[setting]
    except KeyError:
        raise ValueError(
            f"unknown setting {setting!r}; expected one of {sorted(SETTINGS)}"
        ) from None


@dataclass(frozen=True)
class CardinalTemperatures:
    """Base, optimal and ceiling temperatures (deg C) of a crop."""

    base: float
    optimal: float
    ceiling: float

    def __post_init__(self):
        if not (self.base < self.optimal < self.ceiling):
            raise DataError(
                "cardinal temperatures must satisfy base < optimal < ceiling, "
                f"got ({self.base}, {self.optimal}, {self.ceiling})"
            )


def _triangular_density(x, low, mode, high):
    x = np.asarray(x, dtype=float)
    up = 2.0 * (x - low) / ((high - low) * (mode - low))
    down = 2.0 * (high - x) / ((high - low) * (high - mode))
    out = np.where(x <= mode, up, down)
    return np.where((x < low) | (x > high), 0.0, out)


def gdd(t_min, t_max, cardinals):
    """Growing degree days for one day, in [0, 1].

    The truncated average temperature ``(max(t_min, base) + min(t_max,
    ceiling)) / 2`` is pushed through the triangular density over
    ``(base, optimal, ceiling)``, normalized so the optimum scores 1.
    The truncated average can still fall outside the support (for example
    a freezing day), in which case the credit is 0.
    """
    t_min = np.asarray(t_min, dtype=float)
    t_max = np.asarray(t_max, dtype=float)
    if np.any(t_min > t_max):
        raise DataError("t_min must not exceed t_max")
    t_av = 0.5 * (
        np.maximum(t_min, cardinals.base) + np.minimum(t_max, cardinals.ceiling)
    )
    peak = _triangular_density(
        cardinals.optimal, cardinals.base, cardinals.optimal, cardinals.ceiling
    )
    out = _triangular_density(t_av, cardinals.base, cardinals.optimal, cardinals.ceiling) / peak
    if out.ndim == 0:
        return float(out)
    return out


def accumulate_by_season(seasons, values):
    """Prefix sums of ``values`` restarting at each season change.

    ``seasons`` must be grouped (all rows of a season contiguous); summation
    runs in row order so results are reproducible bit for bit.
    """
    seasons = np.asarray(seasons)
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    starts = np.flatnonzero(np.r_[True, seasons[1:] != seasons[:-1]])
    bounds = np.r_[starts, len(values)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        out[a:b] = np.cumsum(values[a:b])
    return out


def thermal_time(weather, cardinals):
    """Per-season cumulative GDD series aligned with the weather records.

    Requires each season's days to run contiguously from day 1 (accumulation
    starts at the beginning of the year); a gap is rejected naming the
    season and day.
    """
    for season, days in _season_groups(weather.seasons, weather.days):
        if days[0] != 1 or np.any(np.diff(days) != 1):
            missing = _first_gap(days)
            raise DataError(
                f"weather for season {season} must cover days 1..{days[-1]} "
                f"contiguously; missing day {missing}"
            )
    daily = gdd(weather.tmin, weather.tmax, cardinals)
    return accumulate_by_season(weather.seasons, daily)


def _season_groups(seasons, days):
    seasons = np.asarray(seasons)
    starts = np.flatnonzero(np.r_[True, seasons[1:] != seasons[:-1]])
    bounds = np.r_[starts, len(seasons)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        yield seasons[a], np.asarray(days)[a:b]


def _first_gap(days):
    expected = np.arange(1, days[-1] + 1)
    missing = np.setdiff1d(expected, days)
    return int(missing[0]) if missing.size else int(days[-1] + 1)


def ndvi(red, nir):
    """Normalized difference vegetation index, (nir - red)/(nir + red)."""
    red = np.asarray(red, dtype=float)
    nir = np.asarray(nir, dtype=float)
    with np.errstate(invalid="ignore"):
        bad = ((red <= 0) | (red >= 1) | (nir <= 0) | (nir >= 1)) & np.isfinite(red) & np.isfinite(nir)
    if np.any(bad):
        raise DataError("reflectances must lie strictly inside (0, 1)")
    return (nir - red) / (nir + red)


def whittaker_smooth(values, lam, weights=None):
    """First-order Whittaker smoothing with missing entries filled.

    Solves ``min_z sum_j w_j (y_j - z_j)^2 + lam * sum_j (z_j - z_{j-1})^2``
    where ``w_j`` is 1 on observed entries and 0 on missing (NaN) ones, via
    the tridiagonal normal equations ``(W + lam * D'D) z = W y``.

    Parameters
    ----------
    values : array-like
        Daily series; NaN marks a missing observation.
    lam : float
        Penalty weight, >= 0.  ``lam = 0`` returns the input unchanged and is
        only valid on gap-free series (a zero penalty leaves missing entries
        undetermined).
    weights : array-like, optional
        Overrides the observed/missing indicator, e.g. for QA down-weighting.

    Returns
    -------
    numpy.ndarray
        Smoothed series with every entry filled.
    """
    y = np.asarray(values, dtype=float)
    if y.ndim != 1:
        raise DataError("whittaker_smooth expects a one-dimensional series")
    if lam < 0:
        raise DataError("lam must be non-negative")
    if weights is None:
        w = np.isfinite(y).astype(float)
    else:
        w = check_finite(np.asarray(weights, dtype=float), "weights")
        w = np.where(np.isfinite(y), w, 0.0)
    n_obs = int(np.count_nonzero(w))
    if n_obs < 2:
        raise DataError(f"need at least 2 observed points to smooth, got {n_obs}")
    n = y.size
    if lam == 0:
        if n_obs != n:
            raise DataError("lam = 0 cannot fill missing entries; use lam > 0")
        return y.copy()

    rhs = np.where(w > 0, w * y, 0.0)
    diag = w + lam * np.r_[1.0, np.full(n - 2, 2.0), 1.0] if n > 1 else w + lam
    ab = np.zeros((2, n))
    ab[0, 1:] = -lam
    ab[1, :] = diag
    return solveh_banded(ab, rhs, lower=False)


def greenup(seasons, smoothed_ndvi):
    """Per-season cumulative NDVI series (rows grouped by season)."""
    return accumulate_by_season(seasons, smoothed_ndvi)


@dataclass(frozen=True)
class FeatureFrame:
    """Daily feature rows keyed by (season, day).

    Columns hold raw covariates ("calendar", "thermal", "ndvi", "greenup")
    and, after standardization, "<name>_std" copies.  Arrays are read-only;
    derived frames are new objects.
    """

    seasons: np.ndarray
    days: np.ndarray
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "seasons", freeze_array(np.asarray(self.seasons, dtype=int)))
        object.__setattr__(self, "days", freeze_array(np.asarray(self.days, dtype=int)))
        cols = {}
        for name, col in self.columns.items():
            col = np.asarray(col, dtype=float)
            if col.shape != self.seasons.shape:
                raise DataError(f"column {name!r} has wrong length")
            cols[name] = freeze_array(col)
        object.__setattr__(self, "columns", cols)

    def __len__(self):
        return self.seasons.size

    def column(self, name):
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(
                f"feature column {name!r} not available; have {sorted(self.columns)}"
            ) from None

    def has_column(self, name):
        return name in self.columns

    def with_columns(self, extra):
        cols = dict(self.columns)
        cols.update(extra)
        return FeatureFrame(self.seasons, self.days, cols)

    def row_lookup(self):
        """Map (season, day) -> row position."""
        return {
            (int(s), int(d)): i
            for i, (s, d) in enumerate(zip(self.seasons, self.days))
        }

    def select(self, mask):
        mask = np.asarray(mask, dtype=bool)
        cols = {k: v[mask] for k, v in self.columns.items()}
        return FeatureFrame(self.seasons[mask], self.days[mask], cols)


def build_features(weather, cardinals, reflectance=None, lam=100.0, smooth_ndvi=True):
    """Assemble the daily FeatureFrame from raw series.

    Calendar time is the day of year; thermal time accumulates GDD computed
    from the weather records.  When a reflectance series is supplied, NDVI is
    smoothed per season (Whittaker, penalty ``lam``) on the weather day grid
    and accumulated into greenup.  ``smooth_ndvi=False`` accumulates the raw
    index instead, leaving cloud gaps unfilled.
    """
    tau = thermal_time(weather, cardinals)
    cols = {
        "calendar": weather.days.astype(float),
        "thermal": tau,
    }
    if reflectance is not None:
        v_raw = np.full(weather.seasons.size, np.nan)
        lookup = {
            (int(s), int(d)): i
            for i, (s, d) in enumerate(zip(weather.seasons, weather.days))
        }
        values = ndvi(reflectance.red, reflectance.nir)
        for s, d, v in zip(reflectance.seasons, reflectance.days, values):
            key = (int(s), int(d))
            if key in lookup and np.isfinite(v):
                v_raw[lookup[key]] = v
        if smooth_ndvi:
            v_out = np.empty_like(v_raw)
            seasons = weather.seasons
            starts = np.flatnonzero(np.r_[True, seasons[1:] != seasons[:-1]])
            bounds = np.r_[starts, seasons.size]
            for a, b in zip(bounds[:-1], bounds[1:]):
                v_out[a:b] = whittaker_smooth(v_raw[a:b], lam)
        else:
            v_out = v_raw
        cols["ndvi"] = v_out
        cols["greenup"] = greenup(weather.seasons, np.nan_to_num(v_out, nan=0.0))
    return FeatureFrame(weather.seasons, weather.days, cols)


@dataclass(frozen=True)
class StandardizationParams:
    """Per-covariate (mean, sd) pairs frozen at fit time.

    The population convention (n divisor) is used for the standard
    deviation; the convention travels with the fitted model so predictions
    reuse the exact training-scale transform.
    """

    means: dict
    sds: dict

    def apply(self, name, values):
        return (np.asarray(values, dtype=float) - self.means[name]) / self.sds[name]

    def invert(self, name, standardized):
        return np.asarray(standardized, dtype=float) * self.sds[name] + self.means[name]

    def to_dict(self):
        return {
            "convention": "population_sd",
            "means": {k: float(v) for k, v in self.means.items()},
            "sds": {k: float(v) for k, v in self.sds.items()},
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            means={k: float(v) for k, v in payload["means"].items()},
            sds={k: float(v) for k, v in payload["sds"].items()},
        )


def standardize(frame, setting):
    """Standardize the setting's covariates over the frame's rows.

    Returns a new frame with ``<name>_std`` columns plus the parameters to
    replay the transform at prediction time.  A covariate with zero sample
    standard deviation is rejected by name.
    """
    names = setting_covariates(setting) if isinstance(setting, str) else tuple(setting)
    means, sds, extra = {}, {}, {}
    for name in names:
        col = frame.column(name)
        check_finite(col, f"covariate {name!r}")
        mean = float(np.mean(col))
        sd = float(np.std(col))
        if sd == 0.0 or not np.isfinite(sd):
            raise DataError(f"covariate {name!r} has zero variance over the fitting rows")
        means[name] = mean
        sds[name] = sd
        extra[f"{name}_std"] = (col - mean) / sd
    return frame.with_columns(extra), StandardizationParams(means, sds)


def apply_standardization(frame, params):
    """Attach ``<name>_std`` columns using previously stored parameters."""
    extra = {}
    for name in params.means:
        extra[f"{name}_std"] = params.apply(name, frame.column(name))
    return frame.with_columns(extra)
