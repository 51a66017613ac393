"""Provider front-ends and the batched guidance bundle fed to the model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch

from ..config import DEFAULT_QUALITY_TEXT, ModelConfig
from .artifacts import read_masks
from .clip import ClipEmbeddings, clip_embed_file, clip_embed_stub
from .masks import SemanticMaskSet, crop_masks, mask_dropout, semantic_masks_stub
from .quality import QualityEmbedding, QualityQuery, quality_embed_file, quality_embed_stub
from ..exceptions import ProviderError, ShapeError


class Region(NamedTuple):
    """Crop/flip geometry applied to a source image."""

    top: int
    left: int
    height: int
    width: int
    flip_h: bool = False
    flip_v: bool = False


@dataclass(frozen=True)
class ImageGuidance:
    quality: QualityEmbedding
    masks: SemanticMaskSet
    clip: ClipEmbeddings


class StubProviders:
    """Parameter-free stand-ins computed from the (cropped) image itself."""

    def __init__(self, quality_dim: int = 256, quality_text: str = DEFAULT_QUALITY_TEXT,
                 mask_mode: str = "grid", mask_cells: int = 4):
        self.quality_dim = quality_dim
        self.quality_text = quality_text
        self.mask_mode = mask_mode
        self.mask_cells = mask_cells

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "StubProviders":
        return cls(cfg.embed_dims.quality, cfg.quality_text, cfg.semantic_mode, cfg.semantic_cells)

    def quality(self, img, image_id=None, region=None) -> QualityEmbedding:
        return quality_embed_stub(QualityQuery(img, self.quality_text, image_id), self.quality_dim)

    def masks(self, img, image_id=None, region=None) -> SemanticMaskSet:
        return semantic_masks_stub(img, self.mask_mode, self.mask_cells)

    def clip(self, img, image_id=None, region=None) -> ClipEmbeddings:
        return clip_embed_stub(img)

    def guidance(self, img, image_id: Optional[str] = None, region: Optional[Region] = None) -> ImageGuidance:
        return ImageGuidance(self.quality(img, image_id, region), self.masks(img, image_id, region),
                             self.clip(img, image_id, region))


class FileProviders(StubProviders):
    """Reads precomputed artifacts keyed by image id.

    Signals whose artifact path is ``None`` fall back to the stub.  Stored
    masks are cut with the same crop/flip geometry as the image; global
    embeddings are reused unchanged for every crop of an image.
    """

    def __init__(self, quality_path=None, mask_path=None, clip_path=None, quality_dim: int = 256,
                 **stub_kwargs):
        super().__init__(quality_dim=quality_dim, **stub_kwargs)
        self.quality_path = quality_path
        self.mask_path = mask_path
        self.clip_path = clip_path
        self._masks = None

    def quality(self, img, image_id=None, region=None) -> QualityEmbedding:
        if self.quality_path is None:
            return super().quality(img, image_id, region)
        return quality_embed_file(QualityQuery(img, self.quality_text, image_id), self.quality_path,
                                  self.quality_dim)

    def masks(self, img, image_id=None, region=None) -> SemanticMaskSet:
        if self.mask_path is None:
            return super().masks(img, image_id, region)
        if self._masks is None:
            self._masks = read_masks(self.mask_path)
        if image_id not in self._masks:
            raise ProviderError(f"image id {image_id!r} not found in {self.mask_path}")
        ms = self._masks[image_id]
        if region is not None:
            ms = crop_masks(ms, *region)
        if ms.shape != tuple(np.shape(img)[1:]):
            raise ShapeError(f"stored masks for {image_id!r} have shape {ms.shape}, image is {np.shape(img)[1:]}")
        return ms

    def clip(self, img, image_id=None, region=None) -> ClipEmbeddings:
        if self.clip_path is None:
            return super().clip(img, image_id, region)
        return clip_embed_file(image_id, self.clip_path)


@dataclass
class GuidanceBundle:
    """Batched conditioning signals; ``None`` marks an absent component."""

    quality: Optional[torch.Tensor] = None       # [B, D_q]
    segments: Optional[torch.Tensor] = None      # [B, H, W] int64 segment labels
    content: Optional[torch.Tensor] = None       # [B, 512]
    degradation: Optional[torch.Tensor] = None   # [B, 512]

    def to(self, dtype: torch.dtype) -> "GuidanceBundle":
        cast = lambda t: None if t is None else t.to(dtype)  # noqa: E731
        return GuidanceBundle(cast(self.quality), self.segments, cast(self.content), cast(self.degradation))


def collate_guidance(guides: Sequence[ImageGuidance], dtype: torch.dtype = torch.float32,
                     dropout_rate: float = 0.0, seed: int = 0) -> GuidanceBundle:
    """Stack per-image guidance; mask dropout uses ``seed + index`` per image."""
    masks = [mask_dropout(g.masks, dropout_rate, seed + i) if dropout_rate > 0 else g.masks
             for i, g in enumerate(guides)]
    return GuidanceBundle(
        quality=torch.as_tensor(np.stack([g.quality.q for g in guides]), dtype=dtype),
        segments=torch.as_tensor(np.stack([m.labels() for m in masks]), dtype=torch.int64),
        content=torch.as_tensor(np.stack([g.clip.content for g in guides]), dtype=dtype),
        degradation=torch.as_tensor(np.stack([g.clip.degradation for g in guides]), dtype=dtype),
    )
