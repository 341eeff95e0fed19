"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .volume import Volume

__all__ = ["as_volume_batch", "as_mask_batch", "check_same_batch"]


def as_volume_batch(X) -> np.ndarray:
    """Coerce to a float32 (n_samples, d, h, w) stack.

    Accepts a 4D array, a single 3D array, or a sequence of 3D arrays /
    Volume objects of identical shape; values must be finite.
    """
    if isinstance(X, Volume):
        X = [X]
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = X[None]
    if not isinstance(X, np.ndarray):
        arrays = [x.data if isinstance(x, Volume) else np.asarray(x) for x in X]
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ValueError(f"samples have mixed shapes: {sorted(shapes)}")
        X = np.stack(arrays)
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"expected (n_samples, d, h, w) volumes, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("need at least one sample")
    if not np.isfinite(X).all():
        raise ValueError("volumes contain NaN or Inf")
    return X


def as_mask_batch(y, like: np.ndarray | None = None) -> np.ndarray:
    """Coerce to a uint8 (n_samples, d, h, w) stack of {0, 1} masks."""
    y = as_volume_batch(y)
    if not np.logical_or(y == 0, y == 1).all():
        raise ValueError("mask voxels must be exactly 0 or 1")
    out = y.astype(np.uint8)
    if like is not None and out.shape != like.shape:
        raise ValueError(f"masks {out.shape} do not match volumes {like.shape}")
    return out


def check_same_batch(X: np.ndarray, y: np.ndarray) -> None:
    if X.shape != y.shape:
        raise ValueError(f"X {X.shape} and y {y.shape} must have identical shapes")
