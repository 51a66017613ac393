"""Seeded synthetic degradation operators and dataset generation.

All operators take and return ``[C, H, W]`` float images in ``[0, 1]``, clamp
their output, and are pure functions of ``(image, params, seed)``.

Composite recipes have a one-line text form, stages separated by ``|``::

    haze t=0.6 A=0.9 | rain density=0.02 length=9 angle=20 seed=4
"""

from __future__ import annotations

import math
import os
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import io as imio
from .exceptions import DatasetError, DegradationError, ParameterError
from .validation import check_image

_U64 = (1 << 64) - 1

KINDS: Dict[str, Dict[str, float]] = {
    "gaussian_noise": {"sigma": 25.0},
    "haze": {"t": 0.6, "A": 0.9},
    "rain": {"density": 0.02, "length": 9, "angle": 15.0, "intensity": 0.8},
    "motion_blur": {"length": 9, "angle": 0.0},
    "low_light": {"gamma": 2.0, "gain": 0.6},
    "snow": {"density": 0.005, "size": 3, "intensity": 0.9},
}


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & _U64)


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ParameterError(msg)


def add_gaussian_noise(img, sigma: float, seed: int = 0) -> np.ndarray:
    """Add i.i.d. Gaussian noise; ``sigma`` is on the 0-255 scale."""
    img = check_image(img)
    _need(sigma >= 0, f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    noise = _rng(seed).standard_normal(img.shape) * (sigma / 255.0)
    return np.clip(img + noise, 0.0, 1.0)


def apply_haze(img, t: float, A: float) -> np.ndarray:
    """Atmospheric scattering: ``img * t + A * (1 - t)``."""
    img = check_image(img)
    _need(0.0 <= t <= 1.0, f"transmission t must lie in [0, 1], got {t}")
    _need(0.0 <= A <= 1.0, f"airlight A must lie in [0, 1], got {A}")
    return np.clip(img * t + A * (1.0 - t), 0.0, 1.0)


def line_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized line kernel of ``length`` taps along ``angle`` degrees.

    Taps sit at unit spacing along the line through the kernel centre and are
    splatted bilinearly, so axis-aligned odd lengths give exact box filters.
    """
    _need(int(length) == length and length >= 1, f"kernel length must be an integer >= 1, got {length}")
    length = int(length)
    half = (length - 1) / 2.0
    radius = int(math.ceil(half)) + 1
    size = 2 * radius + 1
    k = np.zeros((size, size))
    theta = math.radians(angle)
    dx, dy = math.cos(theta), -math.sin(theta)
    for t in np.linspace(-half, half, length):
        x, y = radius + t * dx, radius + t * dy
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                if wx * wy > 1e-12:
                    k[yy, xx] += wx * wy
    # trim empty border rows/cols
    rows, cols = np.nonzero(k.any(axis=1))[0], np.nonzero(k.any(axis=0))[0]
    r = max(radius - rows[0], rows[-1] - radius, radius - cols[0], cols[-1] - radius)
    k = k[radius - r: radius + r + 1, radius - r: radius + r + 1]
    return k / k.sum()


def apply_motion_blur(img, length: int, angle: float = 0.0) -> np.ndarray:
    """Linear motion blur with reflect padding."""
    img = check_image(img)
    k = line_kernel(length, angle)
    if k.shape == (1, 1):
        return img.copy()
    out = np.stack([ndimage.convolve(ch, k, mode="reflect") for ch in img])
    return np.clip(out, 0.0, 1.0)


def rain_layer(shape: Tuple[int, int], density: float, length: int, angle: float,
               seed: int, intensity: float = 0.8) -> np.ndarray:
    """Non-negative ``[H, W]`` streak layer."""
    seeds = (_rng(seed).random(shape) < density).astype(np.float64)
    k = line_kernel(length, angle)
    streaks = ndimage.convolve(seeds, k / k.max(), mode="constant")
    return intensity * np.clip(streaks, 0.0, 1.0)


def apply_rain(img, density: float, length: int = 9, angle: float = 15.0, seed: int = 0,
               intensity: float = 0.8) -> np.ndarray:
    img = check_image(img)
    _need(0.0 <= density <= 1.0, f"rain density must lie in [0, 1], got {density}")
    _need(int(length) == length and length >= 1, f"streak length must be an integer >= 1, got {length}")
    _need(0.0 <= intensity <= 1.0, f"rain intensity must lie in [0, 1], got {intensity}")
    if density == 0:
        return img.copy()
    layer = rain_layer(img.shape[1:], density, int(length), angle, seed, intensity)
    return np.clip(img + layer[None], 0.0, 1.0)


def apply_low_light(img, gamma: float, gain: float) -> np.ndarray:
    img = check_image(img)
    _need(gamma > 0, f"gamma must be > 0, got {gamma}")
    _need(gain > 0, f"gain must be > 0, got {gain}")
    return np.clip(gain * np.power(img, gamma), 0.0, 1.0)


def flake_footprint(size: int) -> np.ndarray:
    """Disk-shaped sprite of diameter ``size`` pixels."""
    _need(int(size) == size and size >= 1, f"flake size must be an integer >= 1, got {size}")
    r = (int(size) - 1) / 2.0
    n = int(size)
    yy, xx = np.mgrid[:n, :n] - r
    return (yy ** 2 + xx ** 2) <= r * r + 0.5


def apply_snow(img, density: float, size: int = 3, seed: int = 0, intensity: float = 0.9) -> np.ndarray:
    """Additive bright disk sprites centred on seeded pixels."""
    img = check_image(img)
    _need(0.0 <= density <= 1.0, f"snow density must lie in [0, 1], got {density}")
    _need(0.0 <= intensity <= 1.0, f"snow intensity must lie in [0, 1], got {intensity}")
    fp = flake_footprint(size)
    if density == 0:
        return img.copy()
    seeds = _rng(seed).random(img.shape[1:]) < density
    flakes = ndimage.binary_dilation(seeds, structure=fp)
    return np.clip(img + intensity * flakes[None], 0.0, 1.0)


# ----------------------------------------------------------- declarative specs

@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown degradation kind {self.kind!r}; expected one of {sorted(KINDS)}")
        unknown = set(self.params) - set(KINDS[self.kind])
        if unknown:
            raise ParameterError(f"{self.kind}: unknown parameter(s) {sorted(unknown)}")
        merged = dict(KINDS[self.kind])
        merged.update({k: float(v) for k, v in self.params.items()})
        object.__setattr__(self, "params", merged)
        object.__setattr__(self, "seed", int(self.seed))
        p = merged
        if self.kind == "gaussian_noise":
            _need(p["sigma"] >= 0, "sigma must be >= 0")
        elif self.kind == "haze":
            _need(0 <= p["t"] <= 1 and 0 <= p["A"] <= 1, "haze t and A must lie in [0, 1]")
        elif self.kind == "low_light":
            _need(p["gamma"] > 0 and p["gain"] > 0, "low_light gamma and gain must be > 0")
        elif self.kind in ("rain", "snow"):
            _need(0 <= p["density"] <= 1, f"{self.kind} density must lie in [0, 1]")
        if self.kind in ("rain", "motion_blur"):
            _need(p["length"] >= 1 and p["length"] == int(p["length"]), "length must be an integer >= 1")

    def apply(self, img, seed_offset: int = 0) -> np.ndarray:
        p = self.params
        seed = self.seed ^ int(seed_offset)
        if self.kind == "gaussian_noise":
            return add_gaussian_noise(img, p["sigma"], seed)
        if self.kind == "haze":
            return apply_haze(img, p["t"], p["A"])
        if self.kind == "rain":
            return apply_rain(img, p["density"], int(p["length"]), p["angle"], seed, p["intensity"])
        if self.kind == "motion_blur":
            return apply_motion_blur(img, int(p["length"]), p["angle"])
        if self.kind == "low_light":
            return apply_low_light(img, p["gamma"], p["gain"])
        return apply_snow(img, p["density"], int(p["size"]), seed, p["intensity"])

    def to_text(self) -> str:
        parts = [self.kind] + [f"{k}={v!r}" for k, v in self.params.items()] + [f"seed={self.seed}"]
        return " ".join(parts)


@dataclass(frozen=True)
class CompositeSpec:
    stages: Tuple[DegradationSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ParameterError("a composite needs at least one stage")

    @property
    def tag(self) -> str:
        return "+".join(s.kind for s in self.stages)

    def to_text(self) -> str:
        return " | ".join(s.to_text() for s in self.stages)


def compose(img, spec: CompositeSpec | Sequence[DegradationSpec], seed_offset: int = 0) -> np.ndarray:
    """Apply the stages of ``spec`` in order."""
    if not isinstance(spec, CompositeSpec):
        spec = CompositeSpec(tuple(spec))
    out = check_image(img)
    for i, stage in enumerate(spec.stages):
        try:
            out = stage.apply(out, seed_offset)
        except (ParameterError, ValueError) as exc:
            raise DegradationError(f"stage {i} ({stage.kind}): {exc}") from exc
    return out


def parse_stage(text: str) -> DegradationSpec:
    tokens = shlex.split(text)
    if not tokens:
        raise ParameterError("empty degradation stage")
    kind, params, seed = tokens[0], {}, 0
    for tok in tokens[1:]:
        key, sep, value = tok.partition("=")
        if not sep:
            raise ParameterError(f"expected key=value in stage {text!r}, got {tok!r}")
        try:
            if key == "seed":
                seed = int(value)
            else:
                params[key] = float(value)
        except ValueError as exc:
            raise ParameterError(f"{kind}.{key}: cannot parse {value!r}") from exc
    return DegradationSpec(kind, params, seed)


def parse_composite(text: str) -> CompositeSpec:
    return CompositeSpec(tuple(parse_stage(part) for part in text.split("|")))


def load_specs(path: str | os.PathLike) -> List[CompositeSpec]:
    """One composite per non-empty, non-comment line."""
    specs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            specs.append(parse_composite(line))
    if not specs:
        raise ParameterError(f"{path}: no degradation specs")
    return specs


def generate_dataset(clean_dir, out_dir, specs: Sequence[CompositeSpec], count: int,
                     seed: int = 0) -> List[imio.ManifestRow]:
    """Write ``count`` degraded/clean PNG pairs plus ``manifest.txt`` into ``out_dir``.

    Pair ``i`` uses clean image ``i mod n_images`` and spec ``i mod n_specs``;
    stochastic stages are seeded with ``stage.seed ^ seed ^ i``.
    """
    clean_paths = imio.list_images(clean_dir)
    if not clean_paths:
        raise DatasetError(f"no readable images in {clean_dir}")
    if not specs:
        raise DatasetError("no degradation specs given")
    out = Path(out_dir)
    try:
        (out / "degraded").mkdir(parents=True, exist_ok=True)
        (out / "clean").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc.strerror}") from exc
    cache: Dict[Path, np.ndarray] = {}
    rows = []
    for i in range(int(count)):
        src = clean_paths[i % len(clean_paths)]
        spec = specs[i % len(specs)]
        if src not in cache:
            cache[src] = imio.read_image(src)
        clean = cache[src]
        degraded = compose(clean, spec, seed_offset=int(seed) ^ i)
        name = f"{i:05d}.png"
        imio.write_image(out / "degraded" / name, degraded)
        imio.write_image(out / "clean" / name, clean)
        rows.append(imio.ManifestRow(f"degraded/{name}", f"clean/{name}", spec.tag))
    imio.write_manifest(out / "manifest.txt", rows)
    return imio.read_manifest(out / "manifest.txt")
