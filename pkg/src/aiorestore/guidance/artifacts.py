"""Binary containers for precomputed guidance artifacts.

Embedding file (little-endian)::

    magic      8 bytes   b"AIOEMB\\x00\\x01"
    dim        uint32    length of each vector
    n_vectors  uint32    vectors per record (1 = quality, 2 = content, degradation)
    count      uint32    number of records
    records    count x { id_len uint16 | id utf-8 | float32[n_vectors * dim] }

Mask file (little-endian)::

    magic      8 bytes   b"AIOMSK\\x00\\x01"
    count      uint32
    records    count x { id_len uint16 | id utf-8 | H uint32 | W uint32 | n_masks uint32 |
                         n_masks x { n_runs uint32 | runs uint32[n_runs] } }

Mask runs encode the row-major flattened mask as alternating run lengths,
starting with a (possibly empty) run of zeros; the runs sum to ``H * W``.
"""

from __future__ import annotations

import os
import struct
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from ..exceptions import ProviderError, ValidationError
from .masks import SemanticMaskSet

EMBED_MAGIC = b"AIOEMB\x00\x01"
MASK_MAGIC = b"AIOMSK\x00\x01"


def _pack_id(image_id: str) -> bytes:
    raw = image_id.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError(f"image id too long: {image_id[:40]}...")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProviderError(f"{self.path}: truncated artifact file")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def ident(self) -> str:
        (n,) = struct.unpack("<H", self.take(2))
        return self.take(n).decode("utf-8")


def write_embeddings(path: str | os.PathLike, records: Mapping[str, Sequence[np.ndarray]]) -> None:
    """Write ``{image_id: [vector, ...]}``; all vectors share one length."""
    items = [(k, [np.asarray(v, dtype="<f4").ravel() for v in vs]) for k, vs in records.items()]
    n_vec = len(items[0][1]) if items else 1
    dim = items[0][1][0].size if items else 0
    chunks = [EMBED_MAGIC, struct.pack("<III", dim, n_vec, len(items))]
    for key, vecs in items:
        if len(vecs) != n_vec or any(v.size != dim for v in vecs):
            raise ValidationError(f"record {key!r}: expected {n_vec} vectors of length {dim}")
        chunks.append(_pack_id(key))
        chunks.extend(v.tobytes() for v in vecs)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_embeddings(path: str | os.PathLike) -> Tuple[int, int, Dict[str, Tuple[np.ndarray, ...]]]:
    """Return ``(dim, n_vectors, {image_id: vectors})`` with float32 vectors."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ProviderError(f"cannot read embedding file {path!r}: {exc.strerror}") from exc
    r = _Reader(data, path)
    if r.take(8) != EMBED_MAGIC:
        raise ProviderError(f"{path}: not an embedding file (bad magic)")
    dim, n_vec, count = r.u32(), r.u32(), r.u32()
    out = {}
    for _ in range(count):
        key = r.ident()
        flat = np.frombuffer(r.take(4 * dim * n_vec), dtype="<f4").astype(np.float32)
        out[key] = tuple(flat[i * dim:(i + 1) * dim] for i in range(n_vec))
    return dim, n_vec, out


def encode_runs(mask: np.ndarray) -> np.ndarray:
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat.size and flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def decode_runs(runs: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if runs.sum() != shape[0] * shape[1]:
        raise ValidationError(f"mask runs sum to {runs.sum()}, expected {shape[0] * shape[1]}")
    values = np.arange(runs.size) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def write_masks(path: str | os.PathLike, records: Mapping[str, SemanticMaskSet]) -> None:
    chunks = [MASK_MAGIC, struct.pack("<I", len(records))]
    for key, ms in records.items():
        chunks.append(_pack_id(key))
        chunks.append(struct.pack("<III", ms.shape[0], ms.shape[1], len(ms.masks)))
        for m in ms.masks:
            runs = encode_runs(m)
            chunks.append(struct.pack("<I", runs.size))
            chunks.append(runs.astype("<u4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_masks(path: str | os.PathLike) -> Dict[str, SemanticMaskSet]:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ProviderError(f"cannot read mask file {path!r}: {exc.strerror}") from exc
    r = _Reader(data, path)
    if r.take(8) != MASK_MAGIC:
        raise ProviderError(f"{path}: not a mask file (bad magic)")
    out = {}
    for _ in range(r.u32()):
        key = r.ident()
        h, w, n = r.u32(), r.u32(), r.u32()
        masks = []
        for _ in range(n):
            n_runs = r.u32()
            runs = np.frombuffer(r.take(4 * n_runs), dtype="<u4")
            masks.append(decode_runs(runs, (h, w)))
        out[key] = SemanticMaskSet(tuple(masks), (h, w))
    return out
