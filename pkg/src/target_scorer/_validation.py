"""Input checks shared by the estimator classes and the CLI."""

from __future__ import annotations

import numpy as np

from .core import InvalidInputError


def check_points(points, name="points") -> np.ndarray:
    """Coerce to a finite float array of shape (n, 2); accepts objects with ``x``/``y``."""
    if points is None:
        return np.zeros((0, 2))
    if len(points) and hasattr(points[0], "x"):
        points = [(p.x, p.y) for p in points]
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return np.zeros((0, 2))
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError(f"{name} must have shape (n, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contain non-finite values")
    return arr


def check_rgb_image(image, name="image") -> np.ndarray:
    arr = np.asarray(image)
    if arr.size == 0:
        raise InvalidInputError(f"{name} is empty")
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise InvalidInputError(f"{name} must be H x W x 3, got {arr.shape}")
    arr = arr[..., :3]
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and arr.max(initial=0) <= 1.0:
            arr = arr * 255.0
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return arr


def check_heat_tensors(X):
    """Return ``(list_of_HeatTensor, was_single)``."""
    from .heatmap import HeatTensor

    if isinstance(X, HeatTensor):
        return [X], True
    if isinstance(X, np.ndarray) and X.ndim in (2, 3) and X.dtype != object:
        return [HeatTensor.from_array(X)], True
    tensors = [x if isinstance(x, HeatTensor) else HeatTensor.from_array(x) for x in X]
    if not tensors:
        raise InvalidInputError("no heatmaps given")
    return tensors, False
