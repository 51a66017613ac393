"""Full-reference fidelity metrics on ``[0, 1]`` images."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.signal import convolve2d

from .exceptions import MetricError, ShapeError

LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB with peak 1; identical inputs give ``math.inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def to_gray(img: np.ndarray) -> np.ndarray:
    """``[C, H, W]`` (or ``[H, W]``) to ``[H, W]`` using Rec. 601 luma weights."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[0] == 1:
        return img[0]
    if img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=1)
    raise ShapeError(f"expected 1 or 3 channels, got {img.shape[0]}")


@lru_cache(maxsize=8)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    w.setflags(write=False)
    return w


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained Gaussian windows of the luma images."""
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise MetricError(f"image {x.shape} is smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2

    def filt(z):
        return convolve2d(z, w, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
