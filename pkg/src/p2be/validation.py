"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_images(X, allow_single: bool = False) -> np.ndarray:
    """Validate pixel images and return them as a uint8 array.

    Accepts ``[N, 3, H, W]`` integer-valued arrays in ``[0, 255]`` (or a single
    ``[3, H, W]`` image when ``allow_single``).
    """
    X = np.asarray(X)
    if allow_single and X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape [N, 3, H, W], got {list(X.shape)}")
    if X.size == 0:
        raise ValueError("empty image batch")
    if X.dtype != np.uint8:
        if not np.issubdtype(X.dtype, np.number):
            raise ValueError(f"images must be numeric, got dtype {X.dtype}")
        if np.any(X < 0) or np.any(X > 255) or np.any(X != np.round(X)):
            raise ValueError("pixel values must be integers in [0, 255]")
        X = X.astype(np.uint8)
    return X


def check_labels(y, n_samples: int, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"expected {n_samples} labels, got shape {list(y.shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    if np.any(y < 0) or (n_classes is not None and np.any(y >= n_classes)):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)
