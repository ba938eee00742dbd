"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .errors import DimensionMismatch


def as_1d(x, name="array", dtype=float, allow_nan=False) -> np.ndarray:
    """Return ``x`` as a finite 1-d float array."""
    arr = check_array(
        np.asarray(x, dtype=dtype).reshape(-1, 1) if np.ndim(x) <= 1 else x,
        ensure_2d=True,
        dtype=dtype,
        ensure_all_finite="allow-nan" if allow_nan else True,
        input_name=name,
    )
    if arr.shape[1] != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {np.shape(x)}")
    return np.ascontiguousarray(arr[:, 0])


def as_2d(x, name="array", allow_nan=False) -> np.ndarray:
    return check_array(x, dtype=float, ensure_all_finite="allow-nan" if allow_nan else True,
                       input_name=name)


def same_length(*arrays):
    check_consistent_length(*arrays)


def check_square_symmetric(mat, name="matrix", atol=1e-10):
    """Return ``mat`` as a float square array; ``None`` if it is not symmetric."""
    m = np.asarray(mat, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    return m, bool(np.allclose(m, m.T, rtol=0.0, atol=atol * scale))


def check_positive(value, name):
    if not np.all(np.asarray(value) > 0):
        raise ValueError(f"{name} must be positive")
    return value
