"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeError, ValidationError


def check_image(img, *, name: str = "image", copy: bool = False) -> np.ndarray:
    """Validate a ``[C, H, W]`` float image with values in ``[0, 1]``.

    Returns a float64 array.  ``C`` must be 1 or 3.
    """
    arr = np.array(img, dtype=np.float64, copy=copy) if copy else np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must have shape [C, H, W], got {arr.shape}")
    c, h, w = arr.shape
    if c not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {c}")
    if h < 1 or w < 1:
        raise ShapeError(f"{name} has empty spatial extent {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(f"{name} values must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]")
    return arr


def check_feature_map(x, *, name: str = "features") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must have shape [C, H, W], got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a, b, *, names=("a", "b")) -> None:
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise ShapeError(f"{names[0]} {tuple(np.shape(a))} and {names[1]} {tuple(np.shape(b))} differ in shape")


def check_image_batch(images, *, name: str = "X") -> list[np.ndarray]:
    """Accept a ``[N, C, H, W]`` array or a sequence of ``[C, H, W]`` images."""
    if isinstance(images, np.ndarray) and images.ndim == 4:
        items = list(images)
    elif isinstance(images, np.ndarray) and images.ndim == 3:
        raise ShapeError(f"{name} must be a batch of images; wrap a single image in a list")
    else:
        items = list(images)
    if not items:
        raise ValidationError(f"{name} is empty")
    return [check_image(im, name=f"{name}[{i}]") for i, im in enumerate(items)]


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return value
