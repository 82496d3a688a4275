"""Input checks shared by the estimators and the functional API."""

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length


def check_binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def check_rows(X, y, sensitive, *, allow_empty: bool = False):
    """Validate a feature matrix with its binary labels and sensitive attribute.

    Returns float64 ``X`` and int64 ``y``/``sensitive``.
    """
    X = check_array(X, dtype=np.float64, ensure_min_samples=0 if allow_empty else 1)
    y = check_binary(y, "y")
    sensitive = check_binary(sensitive, "sensitive")
    check_consistent_length(X, y, sensitive)
    return X, y, sensitive


def check_sample_weight(sample_weight, n: int) -> np.ndarray:
    if sample_weight is None:
        return np.ones(n)
    w = np.asarray(sample_weight, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"sample_weight must have shape ({n},), got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("sample_weight must be finite and strictly positive")
    return w
