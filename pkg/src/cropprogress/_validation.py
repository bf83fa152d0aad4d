"""Small input-validation helpers used by loaders and estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import DataError


def as_float_array(values, name="values"):
    """Convert to a 1-D float64 array, rejecting non-numeric input."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def check_finite(arr, name="values"):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def check_in_range(arr, low, high, name="values", open_interval=False):
    arr = np.asarray(arr, dtype=float)
    finite = arr[np.isfinite(arr)]
    if open_interval:
        bad = (finite <= low) | (finite >= high)
    else:
        bad = (finite < low) | (finite > high)
    if np.any(bad):
        raise DataError(
            f"{name} must lie in {'(' if open_interval else '['}{low}, "
            f"{high}{')' if open_interval else ']'}; "
            f"offending value {finite[bad][0]!r}"
        )
    return arr


def require_keys(mapping, keys, context):
    missing = [k for k in keys if k not in mapping]
    if missing:
        raise DataError(f"{context}: missing {', '.join(map(str, missing))}")


def freeze_array(arr):
    """Return a read-only view; shared containers must not be mutated."""
    arr = np.asarray(arr)
    arr.setflags(write=False)
    return arr
