"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils import check_array


def as_samples(X, min_samples: int = 1) -> np.ndarray:
    """Flatten a 1D sample set (or an (n, 1) column) to a finite float array."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    arr = check_array(arr.reshape(-1, 1), ensure_min_samples=min_samples).ravel()
    return arr


def as_traces(X, min_rows: int = 1) -> np.ndarray:
    """2D array of traces, one row per shot."""
    arr = np.asarray(X)
    if arr.ndim == 1:
        arr = arr[None, :]
    if np.iscomplexobj(arr):
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise ValueError("expected a finite 2D array of traces")
        if arr.shape[0] < min_rows:
            raise ValueError(f"need at least {min_rows} traces, got {arr.shape[0]}")
        return arr
    return check_array(arr, ensure_min_samples=min_rows)
