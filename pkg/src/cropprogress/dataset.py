"""Observational data model and CSV ingestion.

Progress surveys arrive as weekly percentages per stage; weather and
reflectance as daily series.  Loaders validate the schemas, convert percent
to proportions, and keep every container immutable after construction so
tables can be shared freely between tasks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._validation import freeze_array
from .exceptions import DataError

#: Dips in a cumulative stage series up to this size (on the 0..1 scale) are
#: survey revisions and get clamped to the running maximum; anything larger
#: is a schema error.
MONOTONE_TOLERANCE = 0.005


@dataclass(frozen=True)
class StageScheme:
    """Ordered phenological stage labels of one crop.

    Stage index k runs 2..K over ``stages``; k = 1 is the implicit
    pre-season category every plant occupies, so K = len(stages) + 1.
    """

    crop: str
    stages: tuple

    def __post_init__(self):
        stages = tuple(str(s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if len(stages) < 1:
            raise DataError("a stage scheme needs at least one stage label")
        if len(set(stages)) != len(stages):
            raise DataError("stage labels must be unique")

    @property
    def n_categories(self):
        return len(self.stages) + 1

    def stage_index(self, label):
        """Category index k (2-based) of a stage label."""
        try:
            return self.stages.index(label) + 2
        except ValueError:
            raise DataError(f"unknown stage {label!r} for crop {self.crop!r}") from None


def _sort_key(seasons, days):
    order = np.lexsort((days, seasons))
    return order


def _check_unique_keys(seasons, days, context):
    keys = list(zip(seasons.tolist(), days.tolist()))
    if len(set(keys)) != len(keys):
        seen = set()
        for s, d in keys:
            if (s, d) in seen:
                raise DataError(f"{context}: duplicate record for season {s}, day {d}")
            seen.add((s, d))


@dataclass(frozen=True)
class ProgressPanel:
    """Weekly cumulative stage proportions per (season, day).

    ``y`` has one column per category including the implicit first one
    (always 1).  Rows are sorted by (season, day).  Loaded survey panels are
    monotone non-decreasing in time within each stage; panels simulated
    under the conditionally-independent-categories family are exempt
    (``monotone_time=False``) because sampled proportions need not nest.
    """

    scheme: StageScheme
    seasons: np.ndarray
    days: np.ndarray
    y: np.ndarray
    monotone_time: bool = True

    def __post_init__(self):
        seasons = np.asarray(self.seasons, dtype=int)
        days = np.asarray(self.days, dtype=int)
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2 or y.shape != (seasons.size, self.scheme.n_categories):
            raise DataError(
                f"y must have shape (n, {self.scheme.n_categories}), got {y.shape}"
            )
        order = _sort_key(seasons, days)
        seasons, days, y = seasons[order], days[order], y[order].copy()
        _check_unique_keys(seasons, days, "progress panel")
        if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
            raise DataError("progress proportions must lie in [0, 1]")
        if not np.allclose(y[:, 0], 1.0, rtol=0, atol=0):
            raise DataError("the implicit first category must be 1 in every record")
        if self.monotone_time:
            for s in np.unique(seasons):
                block = y[seasons == s]
                if np.any(np.diff(block, axis=0) < 0):
                    k = int(np.argwhere(np.diff(block, axis=0) < 0)[0][1])
                    label = "<pre-season>" if k == 0 else self.scheme.stages[k - 1]
                    raise DataError(
                        f"stage {label!r} decreases over time in season {s}"
                    )
        object.__setattr__(self, "seasons", freeze_array(seasons))
        object.__setattr__(self, "days", freeze_array(days))
        object.__setattr__(self, "y", freeze_array(y))

    def __len__(self):
        return self.seasons.size

    @property
    def season_values(self):
        return np.unique(self.seasons)


@dataclass(frozen=True)
class WeatherSeries:
    """Daily minimum/maximum 2 m air temperature records."""

    seasons: np.ndarray
    days: np.ndarray
    tmin: np.ndarray
    tmax: np.ndarray

    def __post_init__(self):
        seasons = np.asarray(self.seasons, dtype=int)
        days = np.asarray(self.days, dtype=int)
        tmin = np.asarray(self.tmin, dtype=float)
        tmax = np.asarray(self.tmax, dtype=float)
        order = _sort_key(seasons, days)
        seasons, days = seasons[order], days[order]
        tmin, tmax = tmin[order], tmax[order]
        _check_unique_keys(seasons, days, "weather series")
        if not (np.all(np.isfinite(tmin)) and np.all(np.isfinite(tmax))):
            raise DataError("temperatures must be finite")
        bad = np.flatnonzero(tmin > tmax)
        if bad.size:
            i = bad[0]
            raise DataError(
                f"t_min > t_max for season {seasons[i]}, day {days[i]}"
            )
        for name, arr in (("seasons", seasons), ("days", days), ("tmin", tmin), ("tmax", tmax)):
            object.__setattr__(self, name, freeze_array(arr))

    def __len__(self):
        return self.seasons.size


@dataclass(frozen=True)
class ReflectanceSeries:
    """Daily red/NIR surface reflectance; NaN marks a cloud gap."""

    seasons: np.ndarray
    days: np.ndarray
    red: np.ndarray
    nir: np.ndarray

    def __post_init__(self):
        seasons = np.asarray(self.seasons, dtype=int)
        days = np.asarray(self.days, dtype=int)
        red = np.asarray(self.red, dtype=float)
        nir = np.asarray(self.nir, dtype=float)
        order = _sort_key(seasons, days)
        seasons, days, red, nir = seasons[order], days[order], red[order], nir[order]
        _check_unique_keys(seasons, days, "reflectance series")
        for name, arr in (("red", red), ("nir", nir)):
            present = arr[np.isfinite(arr)]
            if np.any((present <= 0) | (present >= 1)):
                raise DataError(f"{name} reflectance must lie strictly inside (0, 1)")
        for name, arr in (("seasons", seasons), ("days", days), ("red", red), ("nir", nir)):
            object.__setattr__(self, name, freeze_array(arr))

    def __len__(self):
        return self.seasons.size


def _read_rows(path, required, context):
    """Read a CSV with a header, returning (header, list of row dicts)."""
    try:
        handle = open(path, "r", newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{context}: cannot open {path}: {exc}") from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{context}: {path} is empty") from None
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(
                f"{context}: {path} is missing column(s) {', '.join(missing)}"
            )
        rows = []
        for line_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{context}: row {line_no} has {len(row)} fields, expected {len(header)}"
                )
            rows.append((line_no, dict(zip(header, (c.strip() for c in row)))))
    return header, rows


def _parse_float(text, row_no, column, context, allow_blank=False):
    if text == "":
        if allow_blank:
            return np.nan
        raise DataError(f"{context}: row {row_no}, column {column!r} is empty")
    try:
        return float(text)
    except ValueError:
        raise DataError(
            f"{context}: row {row_no}, column {column!r}: not a number ({text!r})"
        ) from None


def _parse_int(text, row_no, column, context):
    value = _parse_float(text, row_no, column, context)
    if value != int(value):
        raise DataError(
            f"{context}: row {row_no}, column {column!r}: expected an integer, got {text!r}"
        )
    return int(value)


def load_progress(path, scheme):
    """Load a progress CSV (columns: season, day, one percent column per stage).

    Percentages are converted to proportions and the implicit first category
    is synthesized at 1.  Small monotonicity dips (at most 0.5 percentage
    points, survey revisions) are clamped to the running maximum; larger
    dips are rejected naming the row and stage.
    """
    context = "progress data"
    required = ["season", "day", *scheme.stages]
    _, rows = _read_rows(path, required, context)
    seasons, days, values = [], [], []
    for row_no, row in rows:
        seasons.append(_parse_int(row["season"], row_no, "season", context))
        day = _parse_int(row["day"], row_no, "day", context)
        if not (1 <= day <= 366):
            raise DataError(f"{context}: row {row_no}: day {day} outside 1..366")
        days.append(day)
        rec = []
        for stage in scheme.stages:
            pct = _parse_float(row[stage], row_no, stage, context)
            if not (0.0 <= pct <= 100.0):
                raise DataError(
                    f"{context}: row {row_no}, column {stage!r}: "
                    f"value {pct} outside [0, 100]"
                )
            rec.append(pct / 100.0)
        values.append(rec)

    seasons = np.asarray(seasons, dtype=int)
    days = np.asarray(days, dtype=int)
    values = np.asarray(values, dtype=float).reshape(len(rows), len(scheme.stages))
    order = _sort_key(seasons, days)
    row_numbers = np.asarray([r for r, _ in rows])[order]
    seasons, days, values = seasons[order], days[order], values[order]
    _check_unique_keys(seasons, days, context)

    # clamp sub-tolerance dips to the running maximum, reject larger ones
    for s in np.unique(seasons):
        idx = np.flatnonzero(seasons == s)
        for k, stage in enumerate(scheme.stages):
            running = -np.inf
            for i in idx:
                v = values[i, k]
                if v >= running:
                    running = v
                elif running - v <= MONOTONE_TOLERANCE:
                    values[i, k] = running
                else:
                    raise DataError(
                        f"{context}: row {row_numbers[i]}, column {stage!r}: "
                        f"value drops from {running * 100:g} to {v * 100:g} percent "
                        f"(dip exceeds {MONOTONE_TOLERANCE * 100:g} points)"
                    )

    y = np.column_stack([np.ones(len(seasons)), values])
    return ProgressPanel(scheme, seasons, days, y)


def write_progress(panel, path):
    """Write a panel back to the progress CSV schema (percent, 6 decimals)."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["season", "day", *panel.scheme.stages])
        for s, d, rec in zip(panel.seasons, panel.days, panel.y):
            writer.writerow(
                [int(s), int(d), *(_format_percent(v) for v in rec[1:])]
            )


def _format_percent(proportion):
    return f"{proportion * 100.0:.6f}".rstrip("0").rstrip(".") or "0"


def load_weather(path):
    """Load a weather CSV (columns: season, day, tmin, tmax)."""
    context = "weather data"
    _, rows = _read_rows(path, ["season", "day", "tmin", "tmax"], context)
    seasons, days, tmin, tmax = [], [], [], []
    for row_no, row in rows:
        seasons.append(_parse_int(row["season"], row_no, "season", context))
        days.append(_parse_int(row["day"], row_no, "day", context))
        lo = _parse_float(row["tmin"], row_no, "tmin", context)
        hi = _parse_float(row["tmax"], row_no, "tmax", context)
        if lo > hi:
            raise DataError(f"{context}: row {row_no}: tmin {lo} exceeds tmax {hi}")
        tmin.append(lo)
        tmax.append(hi)
    return WeatherSeries(seasons, days, tmin, tmax)


def write_weather(weather, path):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["season", "day", "tmin", "tmax"])
        for s, d, lo, hi in zip(weather.seasons, weather.days, weather.tmin, weather.tmax):
            writer.writerow([int(s), int(d), repr(float(lo)), repr(float(hi))])


def load_reflectance(path):
    """Load a reflectance CSV (columns: season, day, red, nir; blanks allowed)."""
    context = "reflectance data"
    _, rows = _read_rows(path, ["season", "day", "red", "nir"], context)
    seasons, days, red, nir = [], [], [], []
    for row_no, row in rows:
        seasons.append(_parse_int(row["season"], row_no, "season", context))
        days.append(_parse_int(row["day"], row_no, "day", context))
        red.append(_parse_float(row["red"], row_no, "red", context, allow_blank=True))
        nir.append(_parse_float(row["nir"], row_no, "nir", context, allow_blank=True))
    return ReflectanceSeries(seasons, days, red, nir)


@dataclass(frozen=True)
class ModelingTable:
    """Progress records joined with their raw covariate values.

    One row per progress observation, sorted by (season, day).  Covariates
    stay on the raw scale; estimators standardize over whatever subset of
    rows they are fitted on and persist the parameters.
    """

    scheme: StageScheme
    seasons: np.ndarray
    days: np.ndarray
    y: np.ndarray
    covariates: dict = field(default_factory=dict)
    monotone_time: bool = True

    def __post_init__(self):
        seasons = np.asarray(self.seasons, dtype=int)
        days = np.asarray(self.days, dtype=int)
        y = np.asarray(self.y, dtype=float)
        order = _sort_key(seasons, days)
        seasons, days, y = seasons[order], days[order], y[order]
        cols = {}
        for name, col in self.covariates.items():
            col = np.asarray(col, dtype=float)
            if col.shape != seasons.shape:
                raise DataError(f"covariate {name!r} has wrong length")
            cols[name] = freeze_array(col[order])
        object.__setattr__(self, "seasons", freeze_array(seasons))
        object.__setattr__(self, "days", freeze_array(days))
        object.__setattr__(self, "y", freeze_array(y))
        object.__setattr__(self, "covariates", cols)

    def __len__(self):
        return self.seasons.size

    @property
    def season_values(self):
        return np.unique(self.seasons)

    def covariate(self, name):
        try:
            return self.covariates[name]
        except KeyError:
            raise DataError(
                f"covariate {name!r} not in modeling table; have {sorted(self.covariates)}"
            ) from None

    def subset_seasons(self, seasons):
        wanted = set(int(s) for s in np.asarray(seasons).ravel())
        missing = wanted - set(self.season_values.tolist())
        if missing:
            raise DataError(f"seasons not present in table: {sorted(missing)}")
        mask = np.isin(self.seasons, sorted(wanted))
        return ModelingTable(
            self.scheme,
            self.seasons[mask],
            self.days[mask],
            self.y[mask],
            {k: v[mask] for k, v in self.covariates.items()},
            monotone_time=self.monotone_time,
        )


def join_panel(progress, features):
    """Join a progress panel with feature rows on exact (season, day) keys.

    Every progress record must have a matching feature row; unmatched keys
    are rejected as a list.  Weekly survey values are never interpolated at
    load time.
    """
    lookup = features.row_lookup()
    keys = list(zip(progress.seasons.tolist(), progress.days.tolist()))
    missing = [k for k in keys if k not in lookup]
    if missing:
        shown = ", ".join(f"(season {s}, day {d})" for s, d in missing[:10])
        more = "" if len(missing) <= 10 else f" and {len(missing) - 10} more"
        raise DataError(f"no feature rows for: {shown}{more}")
    rows = np.asarray([lookup[k] for k in keys], dtype=int)
    covs = {
        name: col[rows]
        for name, col in features.columns.items()
        if not name.endswith("_std")
    }
    return ModelingTable(
        progress.scheme,
        progress.seasons,
        progress.days,
        progress.y,
        covs,
        monotone_time=progress.monotone_time,
    )
