"""Conditioning signal providers: quality state, region masks, content/degradation embeddings."""

from .artifacts import decode_runs, encode_runs, read_embeddings, read_masks, write_embeddings, write_masks
from .clip import ClipEmbeddings, clip_embed_file, clip_embed_stub
from .masks import SemanticMaskSet, crop_masks, mask_dropout, resolve_partition, semantic_masks_stub
from .providers import FileProviders, GuidanceBundle, ImageGuidance, Region, StubProviders, collate_guidance
from .quality import (QualityAdapter, QualityEmbedding, QualityQuery, adapt_quality, quality_embed_file,
                      quality_embed_stub)

__all__ = [
    "ClipEmbeddings", "FileProviders", "GuidanceBundle", "ImageGuidance", "QualityAdapter",
    "QualityEmbedding", "QualityQuery", "Region", "SemanticMaskSet", "StubProviders", "adapt_quality",
    "clip_embed_file", "clip_embed_stub", "collate_guidance", "crop_masks", "decode_runs", "encode_runs",
    "mask_dropout", "quality_embed_file",
    "quality_embed_stub", "read_embeddings", "read_masks", "resolve_partition", "semantic_masks_stub",
    "write_embeddings", "write_masks",
]
