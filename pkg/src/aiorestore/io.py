"""PNG image I/O and dataset manifests.

A manifest is a text file with one tab-separated record per line::

    degraded_path<TAB>clean_path<TAB>degradation_tag

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, List, NamedTuple

import numpy as np
from PIL import Image

from .exceptions import DatasetError
from .validation import check_image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ManifestRow(NamedTuple):
    degraded: str
    clean: str
    tag: str


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit image as a float64 ``[C, H, W]`` array in ``[0, 1]``."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("L" if im.mode in ("1", "I;16", "I", "LA") else "RGB")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    img = check_image(img)
    data = to_uint8(img)
    data = data[0] if data.shape[0] == 1 else data.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


def list_images(directory: str | os.PathLike) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def write_manifest(path: str | os.PathLike, rows: Iterable[ManifestRow]) -> None:
    path = Path(path)
    base = path.parent
    lines = []
    for row in rows:
        if any(c in field for field in row for c in "\t\n"):
            raise DatasetError(f"manifest fields may not contain tabs or newlines: {row}")
        deg, clean = (os.path.relpath(p, base) if os.path.isabs(p) else p for p in row[:2])
        lines.append(f"{deg}\t{clean}\t{row.tag}\n")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def read_manifest(path: str | os.PathLike) -> List[ManifestRow]:
    """Parse a manifest into rows with absolute paths."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc.strerror}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        deg, clean, tag = parts
        rows.append(ManifestRow(str(path.parent / deg), str(path.parent / clean), tag))
    return rows
