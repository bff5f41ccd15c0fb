"""Small input-checking helpers used by the public operations."""
import math

import numpy as np

from .exceptions import InvalidInputError


def check_finite_scalar(value, name):
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise InvalidInputError(f"{name} must be a real number, got {value!r}") from None
    if not math.isfinite(value):
        raise InvalidInputError(f"{name} must be finite, got {value}")
    return value


def check_positive(value, name):
    value = check_finite_scalar(value, name)
    if value <= 0:
        raise InvalidInputError(f"{name} must be > 0, got {value}")
    return value


def check_count(value, name, minimum=0):
    if isinstance(value, bool) or int(value) != value:
        raise InvalidInputError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise InvalidInputError(f"{name} must be >= {minimum}, got {value}")
    return value


def as_float_vector(values, name, allow_empty=False):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise InvalidInputError(f"{name} must not be empty")
    return arr


def as_float_matrix(values, name):
    """Return ``values`` as a 2-D float64 array, rejecting NaN/inf with coordinates."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be two-dimensional, got shape {arr.shape}")
    bad = ~np.isfinite(arr)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise InvalidInputError(f"{name} has non-finite entry {arr[r, c]} at ({r}, {c})")
    return arr


def check_all_finite(arr, name):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        idx = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise InvalidInputError(f"{name} has a non-finite value at flat index {idx}")
    return arr
