"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_chunks(X, horizon: int, action_dim: int) -> np.ndarray:
    """Stack of action chunks as float64 ``(n, H, d)``; a single chunk is promoted."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (horizon, action_dim):
        raise ValueError(f"expected chunks of shape (n, {horizon}, {action_dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("action chunks contain non-finite values")
    return X


def check_same_shape(**arrays) -> tuple[int, ...]:
    shapes = {k: np.shape(v) for k, v in arrays.items()}
    if len(set(shapes.values())) != 1:
        desc = ", ".join(f"{k}={s}" for k, s in shapes.items())
        raise ValueError(f"shape mismatch: {desc}")
    return next(iter(shapes.values()))


def check_unit_interval(name: str, value) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)
    if np.any((v < 0) | (v > 1)):
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return v
