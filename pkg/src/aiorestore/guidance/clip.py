"""Content/degradation embedding providers (512-d each)."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from ..exceptions import ProviderError, ValidationError
from ..validation import check_image
from .quality import _lookup

CLIP_DIM = 512
_CONTENT_GRID = 16
_CONTENT_SEED = 0xC0DE
_DEGRADATION_SEED = 0xDE6A


@dataclass(frozen=True)
class ClipEmbeddings:
    content: np.ndarray
    degradation: np.ndarray

    def __post_init__(self):
        for name in ("content", "degradation"):
            v = np.asarray(getattr(self, name))
            if v.shape != (CLIP_DIM,):
                raise ValidationError(f"{name} embedding must have shape (512,), got {v.shape}")
            if not np.all(np.isfinite(v)):
                raise ValidationError(f"{name} embedding is not finite")


def _area_resize(img: np.ndarray, size: int) -> np.ndarray:
    c, h, w = img.shape
    ys = np.linspace(0, h, size + 1).round().astype(int)
    xs = np.linspace(0, w, size + 1).round().astype(int)
    out = np.empty((c, size, size))
    for i in range(size):
        # images smaller than the grid repeat their edge pixels
        y0 = min(ys[i], h - 1)
        y1 = max(ys[i + 1], y0 + 1)
        for j in range(size):
            x0 = min(xs[j], w - 1)
            x1 = max(xs[j + 1], x0 + 1)
            out[:, i, j] = img[:, y0:y1, x0:x1].mean(axis=(1, 2))
    return out


def content_features(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    small = _area_resize(img, _CONTENT_GRID)
    return (small - 0.5).ravel()


def degradation_features(img: np.ndarray) -> np.ndarray:
    """Residual high-frequency and global photometric statistics."""
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    smooth = np.stack([ndimage.gaussian_filter(ch, 1.0, mode="reflect") for ch in img])
    resid = img - smooth
    absr = np.abs(resid)
    gray = img.mean(axis=0)
    dark = img.min(axis=0)
    local_var = ndimage.uniform_filter(gray ** 2, 5) - ndimage.uniform_filter(gray, 5) ** 2
    hist = np.histogram(np.clip(absr.ravel(), 0, 0.25), bins=8, range=(0, 0.25))[0] / absr.size
    feats = [
        np.log(resid.std(axis=(1, 2)) + 1e-4),
        np.log(absr.mean(axis=(1, 2)) + 1e-4),
        np.log(np.percentile(absr, [50, 90, 99]) + 1e-4),
        np.log(np.percentile(np.maximum(local_var, 0), [10, 50, 90]) + 1e-6),
        [gray.mean(), gray.std(), dark.mean(), (img.max(axis=0) - dark).mean()],
        np.log(hist + 1e-4),
    ]
    return np.concatenate([np.ravel(f) for f in feats])


@lru_cache(maxsize=4)
def _projection(seed: int, n_in: int) -> np.ndarray:
    proj = np.random.default_rng(seed).standard_normal((CLIP_DIM, n_in)) / np.sqrt(n_in)
    proj.setflags(write=False)
    return proj


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def clip_embed_stub(img) -> ClipEmbeddings:
    """Unit-norm 512-d content and degradation vectors from fixed projections."""
    img = check_image(img)
    c = content_features(img)
    d = degradation_features(img)
    return ClipEmbeddings(_unit(_projection(_CONTENT_SEED, c.size) @ c),
                          _unit(_projection(_DEGRADATION_SEED, d.size) @ d))


def clip_embed_file(image_id: str, artifact_path) -> ClipEmbeddings:
    if image_id is None:
        raise ProviderError("file-backed embedding provider needs an image id")
    content, degradation = _lookup(artifact_path, image_id, 2, CLIP_DIM)
    return ClipEmbeddings(content.copy(), degradation.copy())
