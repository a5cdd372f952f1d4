"""Shared input-validation helpers for the estimators in this package."""

import numbers

import numpy as np


def check_matrix(X, name: str = "X", min_rows: int = 1) -> np.ndarray:
    """Coerce ``X`` to a 2-D float64 array and reject non-finite entries."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {X.shape}")
    if X.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {X.shape[0]}")
    if X.shape[1] < 1:
        raise ValueError(f"{name} must have at least one column")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_labels(y, n_rows: int, n_classes: int | None = None, name: str = "y") -> np.ndarray:
    """Coerce ``y`` to a 1-D int64 label vector, optionally bounded by ``n_classes``."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be a 1-D array, got shape {y.shape}")
    if y.shape[0] != n_rows:
        raise ValueError(f"{name} has {y.shape[0]} entries, expected {n_rows}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.floor(y)):
            raise ValueError(f"{name} must hold integer class labels")
    y = y.astype(np.int64)
    if y.size:
        if y.min() < 0:
            raise ValueError(f"{name} contains negative labels")
        if n_classes is not None and y.max() >= n_classes:
            raise ValueError(
                f"{name} contains label {int(y.max())} outside [0, {n_classes})"
            )
    return y


def check_fraction(value, name: str) -> float:
    """Validate a real number constrained to the closed unit interval."""
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number")
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def as_generator(random_state) -> np.random.Generator:
    """Return a :class:`numpy.random.Generator` for an int seed, SeedSequence,
    existing Generator, or None (fresh entropy)."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)
