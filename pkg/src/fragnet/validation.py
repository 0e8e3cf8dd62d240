"""Input validation helpers used by the estimators and network code."""

from __future__ import annotations

import numpy as np
import pandas as pd

from .errors import ValidationError

SYMMETRY_TOL = 1e-12
PSD_TOL = -1e-8


def as_float_2d(X, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting NaN/inf."""
    if isinstance(X, pd.DataFrame):
        X = X.to_numpy()
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or infinite values")
    return arr


def check_window_block(X, min_rows: int = 2, name: str = "window") -> np.ndarray:
    from .errors import DataError

    arr = as_float_2d(X, name)
    if arr.shape[0] < min_rows:
        raise DataError(
            f"{name} has {arr.shape[0]} rows; at least {min_rows} observations required"
        )
    return arr


def check_square(M, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {arr.shape}")
    return arr


def check_symmetric(M, tol: float = SYMMETRY_TOL, name: str = "matrix") -> np.ndarray:
    arr = check_square(M, name)
    if arr.size and np.max(np.abs(arr - arr.T)) > tol:
        raise ValidationError(f"{name} is not symmetric within {tol:g}")
    return arr


def check_correlation_matrix(
    C, tol: float = 1e-8, psd: bool = False, name: str = "correlation"
) -> np.ndarray:
    """Validate unit diagonal, symmetry, entries in [-1, 1], optionally PSD."""
    arr = check_symmetric(C, tol=tol, name=name)
    if np.max(np.abs(np.diag(arr) - 1.0)) > tol:
        raise ValidationError(f"{name} diagonal deviates from 1 by more than {tol:g}")
    if np.max(np.abs(arr)) > 1.0 + tol:
        raise ValidationError(f"{name} has entries outside [-1, 1]")
    if psd:
        lo = float(np.linalg.eigvalsh(arr)[0])
        if lo < PSD_TOL:
            raise ValidationError(f"{name} is not PSD within tolerance (min eig {lo:.3e})")
    return arr


def check_names(names, n: int) -> tuple[str, ...]:
    names = tuple(str(x) for x in names)
    if len(names) != n:
        raise ValidationError(f"got {len(names)} names for {n} columns")
    if len(set(names)) != len(names):
        raise ValidationError("column names contain duplicates")
    return names


def sym_eigvalsh(M: np.ndarray) -> np.ndarray:
    """Shared symmetric eigenvalue path (ascending order; supports stacked input)."""
    return np.linalg.eigvalsh(M)
