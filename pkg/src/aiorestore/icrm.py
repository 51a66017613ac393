"""Augmentation-consistency loss on the restored output and the total objective.

The restored image is perturbed twice: a weak photometric augmentation, then
a strong one applied on top of the weak result.  The internal loss is
``gamma * mean((weak - strong) ** 2)`` and the training objective is
``l1 + alpha * internal``.  All perturbations are photometric so both
branches stay pixel-aligned; randomness is fixed by an integer seed, which
keeps the loss an ordinary differentiable function of the restored image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .config import DEFAULT_STRONG, DEFAULT_WEAK, PHOTOMETRIC_OPS, ModelConfig
from .exceptions import PolicyError, ShapeError, ValidationError

Op = Tuple[str, float]


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ordered photometric ops as ``(kind, magnitude)`` pairs.

    ``brightness`` adds U(-m, m); ``contrast`` scales about the image mean by
    1 + U(-m, m); ``noise`` adds Gaussian noise with sigma ~ U(0, m); ``blur``
    applies a 3x3 Gaussian with sigma ~ U(0, m); ``offset`` adds exactly m.
    With ``clamp`` off the branches are left unclipped (used for exact checks).
    """

    weak: Tuple[Op, ...] = DEFAULT_WEAK
    strong: Tuple[Op, ...] = DEFAULT_STRONG
    clamp: bool = True

    def __post_init__(self):
        for name in ("weak", "strong"):
            ops = tuple((str(k), float(m)) for k, m in getattr(self, name))
            for kind, mag in ops:
                if kind not in PHOTOMETRIC_OPS:
                    raise PolicyError(f"{name} policy: {kind!r} is not a photometric op")
                if mag < 0 or not math.isfinite(mag):
                    raise PolicyError(f"{name} policy: {kind} magnitude must be finite and >= 0")
            object.__setattr__(self, name, ops)
        strong = dict(self.strong)
        for kind, mag in self.weak:
            if kind not in strong or strong[kind] < mag:
                raise PolicyError(f"strong policy must cover the weak {kind} range (>= {mag})")

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "AugmentationPolicy":
        return cls(cfg.augment_weak, cfg.augment_strong, cfg.augment_clamp)

    @classmethod
    def empty(cls) -> "AugmentationPolicy":
        return cls((), (), False)


@dataclass(frozen=True)
class LossBreakdown:
    """Loss terms; fields may be 0-d tensors (training) or floats."""

    l1: Union[float, torch.Tensor]
    internal: Union[float, torch.Tensor]
    total: Union[float, torch.Tensor]
    alpha: float = 0.25

    def __post_init__(self):
        if isinstance(self.total, torch.Tensor):
            expected = (self.l1 + self.alpha * self.internal).detach().double()
            total = self.total.detach().double()
        else:
            expected = float(self.l1) + self.alpha * float(self.internal)
            total = float(self.total)
        l1, internal = (float(t.detach()) if isinstance(t, torch.Tensor) else float(t) for t in (self.l1, self.internal))
        if min(l1, internal, float(total)) < 0:
            raise ValidationError("loss terms must be non-negative")
        if abs(float(total - expected)) > 1e-9 * abs(float(expected)):
            raise ValidationError(f"total {float(total)} != l1 + alpha * internal = {float(expected)}")

    def item(self) -> "LossBreakdown":
        """Plain-float copy; ``total`` is recomputed in double precision."""
        l1, internal = (float(t.detach()) if isinstance(t, torch.Tensor) else float(t) for t in (self.l1, self.internal))
        return LossBreakdown(l1, internal, l1 + self.alpha * internal, self.alpha)


def _generator(seed: int, stream: int) -> torch.Generator:
    ss = np.random.SeedSequence([int(seed) & ((1 << 63) - 1), stream])
    return torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] >> 1))


def _uniform(gen: torch.Generator, n: int, lo: float, hi: float, like: torch.Tensor) -> torch.Tensor:
    u = torch.rand(n, generator=gen, dtype=torch.float64)
    return (lo + (hi - lo) * u).to(like.dtype).view(n, 1, 1, 1)


def _gaussian_blur3(x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-image 3x3 Gaussian blur with reflect padding."""
    b, c, h, w = x.shape
    t = torch.tensor([-1.0, 0.0, 1.0], dtype=x.dtype)
    s = sigma.view(b, 1).clamp_min(1e-6)
    k1 = torch.exp(-(t[None] ** 2) / (2 * s ** 2))
    k1 = k1 / k1.sum(1, keepdim=True)                                  # [B, 3]
    k2 = k1[:, :, None] * k1[:, None, :]                                # [B, 3, 3]
    weight = k2[:, None].repeat_interleave(c, dim=0)                    # [B*C, 1, 3, 3]
    mode = "reflect" if min(h, w) > 1 else "replicate"
    xp = F.pad(x.reshape(1, b * c, h, w), (1, 1, 1, 1), mode=mode)
    return F.conv2d(xp, weight, groups=b * c).reshape(b, c, h, w)


def apply_ops(x: torch.Tensor, ops: Sequence[Op], gen: torch.Generator) -> torch.Tensor:
    b = x.shape[0]
    for kind, m in ops:
        if kind == "brightness":
            x = x + _uniform(gen, b, -m, m, x)
        elif kind == "contrast":
            mean = x.mean(dim=(1, 2, 3), keepdim=True)
            x = (x - mean) * (1.0 + _uniform(gen, b, -m, m, x)) + mean
        elif kind == "noise":
            sigma = _uniform(gen, b, 0.0, m, x)
            x = x + sigma * torch.randn(x.shape, generator=gen, dtype=torch.float64).to(x.dtype)
        elif kind == "blur":
            x = _gaussian_blur3(x, _uniform(gen, b, 0.0, m, x))
        elif kind == "offset":
            x = x + m
        else:
            raise PolicyError(f"{kind!r} is not a photometric op")
    return x


def _as_batch(img):
    if isinstance(img, torch.Tensor):
        return (img[None], True, False) if img.ndim == 3 else (img, False, False)
    arr = torch.as_tensor(np.asarray(img, dtype=np.float64))
    return (arr[None], True, True) if arr.ndim == 3 else (arr, False, True)


def _restore(x: torch.Tensor, squeeze: bool, to_numpy: bool):
    x = x[0] if squeeze else x
    return x.detach().numpy() if to_numpy else x


def _augment(img, ops, clamp: bool, seed: int, stream: int):
    x, squeeze, to_numpy = _as_batch(img)
    out = apply_ops(x, ops, _generator(seed, stream))
    if clamp and ops:
        out = out.clamp(0.0, 1.0)
    return _restore(out, squeeze, to_numpy)


def weak_augment(img, policy: AugmentationPolicy, seed: int = 0):
    """Weak photometric perturbation (identity for an empty weak policy)."""
    return _augment(img, policy.weak, policy.clamp, seed, 0)


def strong_augment(img, policy: AugmentationPolicy, seed: int = 0):
    """Strong photometric perturbation, applied to the weak output."""
    return _augment(img, policy.strong, policy.clamp, seed, 1)


def internal_loss(restored, gamma: float, policy: AugmentationPolicy, seed: int = 0):
    """``gamma * mean((weak(I) - strong(weak(I))) ** 2)``, differentiable in ``restored``."""
    if gamma < 0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    x, _, to_numpy = _as_batch(restored)
    w = weak_augment(x, policy, seed)
    s = strong_augment(w, policy, seed)
    loss = gamma * torch.mean((w - s) ** 2)
    return float(loss) if to_numpy else loss


def total_loss(restored, target, alpha: float, gamma: float, policy: AugmentationPolicy,
               seed: int = 0, use_internal: bool = True) -> LossBreakdown:
    """``l1 + alpha * internal``; pass tensors to keep the graph for backprop."""
    x, _, to_numpy = _as_batch(restored)
    y, _, _ = _as_batch(target)
    if x.shape != y.shape:
        raise ShapeError(f"restored {tuple(x.shape)} and target {tuple(y.shape)} differ in shape")
    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}")
    y = y.to(x.dtype)
    l1 = torch.mean(torch.abs(x - y))
    if use_internal and alpha > 0:
        internal = internal_loss(x, gamma, policy, seed)
    else:
        internal = torch.zeros((), dtype=x.dtype)
    total = l1 + alpha * internal
    out = LossBreakdown(l1, internal, total, float(alpha))
    return out.item() if to_numpy else out


def gamma_at(cfg: ModelConfig, iteration: int) -> float:
    """Internal-loss weight at ``iteration`` (constant unless linear decay is configured)."""
    if cfg.gamma_schedule == "constant" or cfg.optimizer.total_iterations == 0:
        return cfg.loss_gamma
    frac = min(iteration / cfg.optimizer.total_iterations, 1.0)
    return cfg.loss_gamma * (1.0 - frac)
