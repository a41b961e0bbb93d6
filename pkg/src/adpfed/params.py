"""Flat parameter-vector arithmetic.

Every model, update and delta in the simulator is a 1-D ``float64`` numpy
array. The helpers here validate shape and finiteness at module boundaries
and return fresh read-only arrays so values can be shared between clients.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np


class DimensionError(ValueError):
    """Raised when two parameter vectors have different lengths."""


def as_params(values) -> np.ndarray:
    """Copy ``values`` into a frozen 1-D float64 vector, rejecting NaN/Inf."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameter vector contains non-finite entries")
    arr.setflags(write=False)
    return arr


def zeros(d: int) -> np.ndarray:
    return as_params(np.zeros(d))


def check_same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def add(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_length(a, b)
    return as_params(a + b)


def subtract(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_length(a, b)
    return as_params(a - b)


def scale(a, c: float) -> np.ndarray:
    if not math.isfinite(c):
        raise ValueError(f"scale factor must be finite, got {c}")
    return as_params(np.asarray(a, dtype=np.float64) * c)


def l2_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    # np.linalg.norm rescales internally, so large entries do not overflow
    return float(np.linalg.norm(a))


def checksum(a) -> str:
    """Short hex digest of the exact bit pattern, used to prove identical inits."""
    arr = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]
