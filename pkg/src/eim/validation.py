"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class InputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class NumericalError(RuntimeError):
    """Raised when a numerical routine cannot produce a usable result."""


def as_matrix(x, name="x", dim=None) -> np.ndarray:
    """Coerce to a 2-D float array (rows are samples); check column count."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise InputError(f"{name} must be a vector or matrix, got ndim={a.ndim}")
    if dim is not None and a.shape[1] != dim:
        raise InputError(f"{name} has width {a.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name} contains non-finite values")
    return a


def as_vector(x, name="x", length=None) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim != 1:
        raise InputError(f"{name} must be 1-D, got ndim={a.ndim}")
    if length is not None and a.shape[0] != length:
        raise InputError(f"{name} has length {a.shape[0]}, expected {length}")
    return a


def check_square(a, name="matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError(f"{name} must be square, got shape {a.shape}")
    return a


def check_positive(value, name):
    if not value > 0:
        raise InputError(f"{name} must be positive, got {value}")
    return value


def check_count(value, name):
    if int(value) != value or value < 1:
        raise InputError(f"{name} must be a positive integer, got {value}")
    return int(value)
