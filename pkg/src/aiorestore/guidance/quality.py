"""Quality embedding providers and the learnable adapter that consumes them."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import torch
from torch import nn

from ..config import DEFAULT_QUALITY_TEXT
from ..exceptions import ProviderError, ValidationError
from ..validation import check_image
from .artifacts import read_embeddings

_PROJECTION_SEED = 0x51A1
_N_STATS = 16


@dataclass(frozen=True)
class QualityQuery:
    image: np.ndarray
    text: str = DEFAULT_QUALITY_TEXT
    image_id: Optional[str] = None

    def __post_init__(self):
        if not self.text:
            raise ValidationError("quality query text must be non-empty")
        object.__setattr__(self, "image", check_image(self.image))


@dataclass(frozen=True)
class QualityEmbedding:
    q: np.ndarray
    source: str = "stub"

    def __post_init__(self):
        if self.q.ndim != 1 or not np.all(np.isfinite(self.q)):
            raise ValidationError("quality embedding must be a finite vector")
        if self.source not in ("stub", "file"):
            raise ValidationError(f"unknown embedding source {self.source!r}")


def image_statistics(img: np.ndarray) -> np.ndarray:
    """Per-channel mean, log-variance, mean gradient magnitude and log Laplacian energy."""
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    mean = img.mean(axis=(1, 2))
    var = img.var(axis=(1, 2))
    gy = np.diff(img, axis=1, append=img[:, -1:, :])
    gx = np.diff(img, axis=2, append=img[:, :, -1:])
    grad = np.sqrt(gx ** 2 + gy ** 2).mean(axis=(1, 2))
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    lap = p[:, :-2, 1:-1] + p[:, 2:, 1:-1] + p[:, 1:-1, :-2] + p[:, 1:-1, 2:] - 4 * img
    energy = (lap ** 2).mean(axis=(1, 2))
    return np.concatenate([mean, np.log(var + 1e-6), grad, np.log(energy + 1e-8)])


def _text_code(text: str) -> np.ndarray:
    digest = hashlib.sha256(text.encode("utf-8")).digest()[:4]
    return np.frombuffer(digest, dtype=np.uint8).astype(np.float64) / 127.5 - 1.0


@lru_cache(maxsize=16)
def _projection(dim: int) -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED)
    proj = rng.standard_normal((dim, _N_STATS)) / np.sqrt(_N_STATS)
    proj.setflags(write=False)
    return proj


def quality_embed_stub(query: QualityQuery, dim: int = 256) -> QualityEmbedding:
    """Fixed random projection of image statistics and a text code to ``dim``."""
    feats = np.concatenate([image_statistics(query.image), _text_code(query.text)])
    return QualityEmbedding(_projection(int(dim)) @ feats, "stub")


@lru_cache(maxsize=8)
def _load(path: str, mtime: float):
    return read_embeddings(path)


def _lookup(path, image_id, n_vectors: int, dim: int):
    path = os.fspath(path)
    try:
        mtime = os.path.getmtime(path)
    except OSError as exc:
        raise ProviderError(f"embedding file not found: {path!r}") from exc
    stored_dim, stored_n, records = _load(path, mtime)
    if stored_n != n_vectors:
        raise ValidationError(f"{path}: expected {n_vectors} vector(s) per record, file has {stored_n}")
    if stored_dim != dim:
        raise ValidationError(f"{path}: vectors have length {stored_dim}, expected {dim}")
    if image_id not in records:
        raise ProviderError(f"image id {image_id!r} not found in {path}")
    return records[image_id]


def quality_embed_file(query: QualityQuery, artifact_path, dim: int = 256,
                       image_id: Optional[str] = None) -> QualityEmbedding:
    """Return the stored vector for the query's image id, unchanged."""
    key = image_id if image_id is not None else query.image_id
    if key is None:
        raise ProviderError("file-backed quality provider needs an image id")
    (vec,) = _lookup(artifact_path, key, 1, int(dim))
    return QualityEmbedding(vec.copy(), "file")


class QualityAdapter(nn.Module):
    """Learnable affine map from the raw quality state to ``F_q``."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, out_dim)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        return self.proj(q)


def adapt_quality(q, weight, bias):
    """``F_q = W q + b`` (works on numpy arrays or tensors)."""
    return q @ weight.T + bias
