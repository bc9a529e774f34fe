"""Input validation helpers shared by the estimators and file readers."""
from __future__ import annotations

import math
from numbers import Real

import numpy as np


class DataError(ValueError):
    """Malformed input data (files, records, masks)."""


class SchemaError(DataError):
    """A serialized artifact does not match its documented schema."""


def check_probability(value, name: str) -> float:
    if not isinstance(value, Real) or not (0.0 <= float(value) <= 1.0):
        raise ValueError(f"{name} must be a probability in [0, 1], got {value!r}")
    return float(value)


def check_positive(value, name: str, strict: bool = True) -> float:
    if not isinstance(value, Real) or math.isnan(value):
        raise ValueError(f"{name} must be a real number, got {value!r}")
    if (strict and value <= 0) or (not strict and value < 0):
        bound = "> 0" if strict else ">= 0"
        raise ValueError(f"{name} must be {bound}, got {value!r}")
    return float(value)


def check_mask(mask, name: str = "mask") -> np.ndarray:
    """Return ``mask`` as a 2-D boolean array."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] <= 0 or arr.shape[1] <= 0:
        raise DataError(f"{name} must have positive dimensions, got {arr.shape}")
    return arr.astype(bool, copy=False)


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DataError(f"dimension mismatch: {a.shape} vs {b.shape}")
