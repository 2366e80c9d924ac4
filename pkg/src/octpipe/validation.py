"""Input validation helpers shared by the estimators and operators."""

from __future__ import annotations

import numpy as np

from .volcore import NUM_CLASSES, BScan, LabelVolume, OctVolume


def _unwrap(X):
    if isinstance(X, OctVolume):
        return X.voxels
    if isinstance(X, BScan):
        return X.pixels
    if isinstance(X, LabelVolume):
        return X.labels
    return X


def check_images(X, ndims=(2, 3), name="X") -> np.ndarray:
    """Return ``X`` as a float64 array of intensities in [0, 1]."""
    arr = np.asarray(_unwrap(X), dtype=np.float64)
    if arr.ndim not in ndims:
        raise ValueError(f"{name} must have {' or '.join(map(str, ndims))} dims, got {arr.ndim}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return arr


def check_volumes(X, name="X") -> np.ndarray:
    """Stack of volumes ``(n, D, H, W)``; a single ``(D, H, W)`` volume is promoted."""
    if isinstance(X, OctVolume):
        X = X.voxels[None]
    elif isinstance(X, (list, tuple)) and X and isinstance(X[0], OctVolume):
        X = np.stack([v.voxels for v in X])
    arr = check_images(X, ndims=(3, 4), name=name)
    return arr[None] if arr.ndim == 3 else arr


def check_label_volumes(y, name="y") -> np.ndarray:
    if isinstance(y, LabelVolume):
        y = y.labels[None]
    elif isinstance(y, (list, tuple)) and y and isinstance(y[0], LabelVolume):
        y = np.stack([l.labels for l in y])
    arr = np.asarray(y)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must be (n, D, H, W) class ids, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() >= NUM_CLASSES:
        raise ValueError(f"{name} class ids must lie in 0..{NUM_CLASSES - 1}")
    return arr.astype(np.int64)


def check_same_shape(a: np.ndarray, b: np.ndarray, what="inputs") -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what} dimension mismatch: {np.shape(a)} vs {np.shape(b)}")


def check_divisible(shape, factor: int, what="input") -> None:
    bad = [s for s in shape if s % factor]
    if bad:
        raise ValueError(f"{what} spatial dims {tuple(shape)} must be divisible by {factor}")
