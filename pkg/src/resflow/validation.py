"""Small input-validation helpers shared across the package.

Every public entry point funnels array arguments through these so that
shape and dtype errors surface with a usable message instead of deep
inside a BLAS call.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_matrix",
    "as_vector",
    "as_labels",
    "check_finite",
]


def as_matrix(x, name: str = "x", *, min_rows: int = 0) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array.

    Args:
        x: array-like of shape (n, d).
        name: argument name used in error messages.
        min_rows: minimum number of rows required.

    Returns:
        A float64 C-contiguous array of shape (n, d).

    Raises:
        ValueError: if ``x`` is not 2-D, has too few rows, or contains
            non-finite entries.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {arr.shape[0]}")
    check_finite(arr, name)
    return np.ascontiguousarray(arr)


def as_vector(x, name: str = "x", *, size: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a 1-D float64 array, optionally of a fixed size."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise ValueError(f"{name} must have length {size}, got {arr.shape[0]}")
    check_finite(arr, name)
    return np.ascontiguousarray(arr)


def as_labels(y, n: int | None = None, name: str = "y") -> np.ndarray:
    """Coerce class labels to a 1-D int64 array of non-negative ids."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.number):
        raise ValueError(f"{name} must contain integer class ids")
    out = arr.astype(np.int64)
    if arr.size and not np.array_equal(out, np.asarray(arr, dtype=np.float64)):
        raise ValueError(f"{name} must contain integer class ids")
    if n is not None and out.shape[0] != n:
        raise ValueError(f"{name} must have length {n}, got {out.shape[0]}")
    if out.size and out.min() < 0:
        raise ValueError(f"{name} must contain non-negative class ids")
    return out


def check_finite(arr: np.ndarray, name: str = "array") -> None:
    """Raise ValueError if ``arr`` contains NaN or infinity."""
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
