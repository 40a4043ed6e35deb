"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_tile_array(X, patch_size: int | None = None) -> np.ndarray:
    """Validate and coerce a stack of tiles to float32 (n, H, W, C).

    Accepts (n, H, W) single-channel input and adds the channel axis. All
    values must be finite; H and W must be divisible by patch_size when one
    is given.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected tiles of shape (n, H, W, C), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty tile array")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float32)
    if not np.isfinite(X).all():
        raise ValueError("tiles contain non-finite values")
    n, h, w, c = X.shape
    if patch_size is not None and (h % patch_size or w % patch_size):
        raise ValueError(f"tile dims {h}x{w} not divisible by patch size {patch_size}")
    return np.ascontiguousarray(X, dtype=np.float32)


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y.astype(np.int64)
