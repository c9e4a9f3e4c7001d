"""Input validation helpers shared across the package."""
from __future__ import annotations

from typing import Sequence

import numpy as np


class DimensionMismatchError(ValueError):
    """Vector or matrix dimensions disagree with what the caller requires."""


def as_vector(values: Sequence[float] | np.ndarray, *, dim: int | None = None,
              name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally checking its length."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatchError(
            f"{name} has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(values: np.ndarray | Sequence[Sequence[float]], *,
              cols: int | None = None, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array with at least one row."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must have at least one row")
    if cols is not None and arr.shape[1] != cols:
        raise DimensionMismatchError(
            f"{name} has {arr.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_same_dim(u: np.ndarray, v: np.ndarray, *, names: str = "u/v") -> None:
    if u.shape != v.shape:
        raise DimensionMismatchError(
            f"{names} dimensions differ: {u.shape} vs {v.shape}")


def check_positive(value: float, name: str) -> None:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")


def check_nonnegative(value: float, name: str) -> None:
    if value < 0:
        raise ValueError(f"{name} must be non-negative, got {value!r}")
