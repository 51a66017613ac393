"""Region masks: the segmentation stand-in, partition resolution and mask dropout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from ..exceptions import ValidationError
from ..validation import check_image, check_probability

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SemanticMaskSet:
    """``N_m`` binary ``[H, W]`` masks.

    Overlaps and uncovered pixels are allowed on construction (real
    segmenters produce both); :func:`resolve_partition` turns any set into
    an exact partition by giving each pixel to the smallest mask covering it
    and collecting the rest into a trailing background segment.
    """

    masks: Tuple[np.ndarray, ...]
    shape: Tuple[int, int]
    background_policy: str = "smallest_area"

    def __post_init__(self):
        masks = tuple(np.asarray(m, dtype=bool) for m in self.masks)
        for i, m in enumerate(masks):
            if m.shape != tuple(self.shape):
                raise ValidationError(f"mask {i} has shape {m.shape}, expected {tuple(self.shape)}")
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def __len__(self) -> int:
        return len(self.masks)

    def coverage(self) -> np.ndarray:
        """Number of masks covering each pixel."""
        if not self.masks:
            return np.zeros(self.shape, dtype=np.int64)
        return np.sum(self.masks, axis=0, dtype=np.int64)

    def is_partition(self) -> bool:
        return bool(np.all(self.coverage() == 1))

    def labels(self) -> np.ndarray:
        """``[H, W]`` int64 segment index of every pixel (partition required)."""
        ms = self if self.is_partition() else resolve_partition(self)
        out = np.zeros(self.shape, dtype=np.int64)
        for i, m in enumerate(ms.masks):
            out[m] = i
        return out

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "SemanticMaskSet":
        labels = np.asarray(labels)
        return cls(tuple(labels == k for k in np.unique(labels)), labels.shape)

    def equals(self, other: "SemanticMaskSet") -> bool:
        return self.shape == other.shape and len(self) == len(other) and all(
            np.array_equal(a, b) for a, b in zip(self.masks, other.masks))


def resolve_partition(ms: SemanticMaskSet) -> SemanticMaskSet:
    if ms.is_partition():
        return ms
    h, w = ms.shape
    owner = np.full((h, w), -1, dtype=np.int64)
    areas = [int(m.sum()) for m in ms.masks]
    # largest first so smaller masks overwrite; ties keep the lower index
    for i in sorted(range(len(ms.masks)), key=lambda j: (-areas[j], -j)):
        owner[ms.masks[i]] = i
    out = [owner == i for i in range(len(ms.masks))]
    out = [m for m in out if m.any()]
    background = owner < 0
    if background.any():
        out.append(background)
    return SemanticMaskSet(tuple(out), ms.shape, ms.background_policy)


def _grid_shape(cells: int) -> Tuple[int, int]:
    rows = int(np.floor(np.sqrt(cells)))
    while cells % rows:
        rows -= 1
    return rows, cells // rows


def semantic_masks_stub(img, mode: str = "grid", cells_or_bins: int = 4) -> SemanticMaskSet:
    """Deterministic partition of the image into regions.

    ``grid`` tiles the image into ``cells_or_bins`` near-square cells;
    ``quantile`` bins luminance at its quantiles (empty bins are dropped).
    """
    img = check_image(img)
    n = int(cells_or_bins)
    if n < 1:
        raise ValidationError(f"cells_or_bins must be >= 1, got {cells_or_bins}")
    _, h, w = img.shape
    if mode == "grid":
        rows, cols = _grid_shape(n)
        rows, cols = min(rows, h), min(cols, w)
        ys = np.array_split(np.arange(h), rows)
        xs = np.array_split(np.arange(w), cols)
        masks = []
        for yb in ys:
            for xb in xs:
                m = np.zeros((h, w), dtype=bool)
                m[yb[0]: yb[-1] + 1, xb[0]: xb[-1] + 1] = True
                masks.append(m)
        return SemanticMaskSet(tuple(masks), (h, w))
    if mode == "quantile":
        lum = img[0] if img.shape[0] == 1 else np.tensordot(LUMA, img, axes=1)
        edges = np.quantile(lum, np.arange(1, n) / n)
        bins = np.searchsorted(edges, lum, side="right") if n > 1 else np.zeros_like(lum, dtype=np.int64)
        masks = tuple(bins == k for k in range(n) if np.any(bins == k))
        return SemanticMaskSet(masks, (h, w))
    raise ValidationError(f"unknown mask mode {mode!r}")


def mask_dropout(ms: SemanticMaskSet, rate: float, seed: int = 0) -> SemanticMaskSet:
    """Drop each mask with probability ``rate`` and merge it into the background.

    The result is a partition: survivors keep their order and one background
    segment (dropped plus previously uncovered pixels) is appended if non-empty.
    """
    rate = check_probability(rate, "rate")
    ms = resolve_partition(ms)
    if rate == 0.0 or not ms.masks:
        return ms
    keep = np.random.default_rng(int(seed) & ((1 << 64) - 1)).random(len(ms.masks)) >= rate
    if keep.all():
        return ms
    survivors = [m for m, k in zip(ms.masks, keep) if k]
    background = ~np.any(survivors, axis=0) if survivors else np.ones(ms.shape, dtype=bool)
    return SemanticMaskSet(tuple(survivors) + (background,), ms.shape, ms.background_policy)


def crop_masks(ms: SemanticMaskSet, top: int, left: int, height: int, width: int,
               flip_h: bool = False, flip_v: bool = False) -> SemanticMaskSet:
    """Apply crop/flip geometry to every mask; empty masks are removed."""
    out = []
    for m in ms.masks:
        c = m[top: top + height, left: left + width]
        if flip_h:
            c = c[:, ::-1]
        if flip_v:
            c = c[::-1, :]
        if c.any():
            out.append(np.ascontiguousarray(c))
    return SemanticMaskSet(tuple(out), (height, width), ms.background_policy)


def stack_labels(mask_sets: Sequence[SemanticMaskSet]) -> np.ndarray:
    return np.stack([ms.labels() for ms in mask_sets])
