"""Guidance blocks that condition backbone features.

* :class:`QGM` scales and shifts every channel by projections of the quality
  feature ``F_q``.
* :func:`mask_average_pool` replaces each pixel's feature by the mean over
  its segment; :class:`SCA` lets backbone features attend over the pooled map.
* :class:`PromptGenerator` mixes a learnable prompt bank with softmax weights
  predicted from the degradation embedding; :class:`DAM` combines cross
  attention on the content embedding with a sigmoid mask predicted from that
  prompt.

Functional forms take explicit weights so they can be checked against
literal reference computations; the modules own parameters and call them.
Tensors are batched: features ``[B, C, H, W]``, vectors ``[B, D]``.
"""

from __future__ import annotations

import math
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ShapeError, ValidationError
from .guidance.masks import SemanticMaskSet


class MLP(nn.Module):
    """Two linear layers with GELU between; hidden width equals output width."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of ``[B, C, H, W]`` features."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.layer_norm(x.permute(0, 2, 3, 1), (x.shape[1],), self.weight, self.bias, eps=1e-5)
        return y.permute(0, 3, 1, 2)


# ----------------------------------------------------------------------- QGM

def qgm_forward(x: torch.Tensor, f_q: torch.Tensor, w_scale, b_scale, w_shift, b_shift) -> torch.Tensor:
    """``x * (W_s f_q + b_s) + (W_b f_q + b_b)`` broadcast over space."""
    if w_scale.shape[0] != x.shape[1] or w_shift.shape[0] != x.shape[1]:
        raise ShapeError(f"QGM projects to {w_scale.shape[0]} channels, features have {x.shape[1]}")
    if f_q.shape[-1] != w_scale.shape[1]:
        raise ShapeError(f"F_q has length {f_q.shape[-1]}, QGM expects {w_scale.shape[1]}")
    scale = F.linear(f_q, w_scale, b_scale)
    shift = F.linear(f_q, w_shift, b_shift)
    return x * scale[:, :, None, None] + shift[:, :, None, None]


class QGM(nn.Module):
    def __init__(self, channels: int, quality_dim: int):
        super().__init__()
        self.scale = nn.Linear(quality_dim, channels)
        self.shift = nn.Linear(quality_dim, channels)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.trunc_normal_(self.scale.weight, std=0.02)
        # unit scale and zero shift at init so the block starts as identity-like
        nn.init.ones_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(self, x: torch.Tensor, f_q: torch.Tensor) -> torch.Tensor:
        return qgm_forward(x, f_q, self.scale.weight, self.scale.bias, self.shift.weight, self.shift.bias)


# ----------------------------------------------------------------- MAP / SCA

def segment_one_hot(segments: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """``[B, H, W]`` labels -> ``[B, K, H*W]`` indicator matrix."""
    if segments.dtype not in (torch.int32, torch.int64):
        raise ValidationError("segments must hold integer labels")
    if segments.numel() and segments.min() < 0:
        raise ValidationError("segment labels must be non-negative")
    b = segments.shape[0]
    k = int(segments.max()) + 1 if segments.numel() else 1
    flat = segments.reshape(b, -1).long()
    return F.one_hot(flat, k).transpose(1, 2).to(dtype)


def _segments_from_masks(mask_sets, batch: int) -> torch.Tensor:
    if isinstance(mask_sets, SemanticMaskSet):
        mask_sets = [mask_sets] * batch
    for i, ms in enumerate(mask_sets):
        if not ms.is_partition():
            raise ValidationError(f"mask set {i} is not a partition; resolve it first")
    return torch.as_tensor(np.stack([ms.labels() for ms in mask_sets]))


def mask_average_pool(features: torch.Tensor, segments) -> torch.Tensor:
    """Replace every pixel's feature vector with the mean over its segment.

    ``segments`` is a ``[B, H, W]`` label map (an exact partition by
    construction) or one :class:`SemanticMaskSet` per image (or one shared
    set), which must already be a partition.
    """
    if isinstance(segments, (SemanticMaskSet, list, tuple)):
        segments = _segments_from_masks(segments, features.shape[0])
    if features.ndim != 4 or segments.shape != (features.shape[0],) + features.shape[2:]:
        raise ShapeError(f"segments {tuple(segments.shape)} do not match features {tuple(features.shape)}")
    b, c, h, w = features.shape
    onehot = segment_one_hot(segments, features.dtype)           # [B, K, N]
    counts = onehot.sum(-1, keepdim=True).clamp_min(1.0)          # [B, K, 1]
    flat = features.reshape(b, c, h * w)
    means = torch.bmm(onehot, flat.transpose(1, 2)) / counts      # [B, K, C]
    out = torch.bmm(onehot.transpose(1, 2), means)                # [B, N, C]
    return out.transpose(1, 2).reshape(b, c, h, w)


def downsample_segments(segments: torch.Tensor, factor: int) -> torch.Tensor:
    """Majority label in each ``factor x factor`` block (ties -> lowest label)."""
    if factor == 1:
        return segments
    b, h, w = segments.shape
    onehot = segment_one_hot(segments, torch.float32).reshape(b, -1, h, w)
    votes = F.avg_pool2d(onehot, factor)
    return votes.argmax(1)


def multihead_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int
                        ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention on ``[B, N, C]`` tokens split into heads.

    Returns the ``[B, Nq, C]`` output and ``[B, heads, Nq, Nk]`` weights.
    """
    b, nq, c = q.shape
    nk = k.shape[1]
    d = c // heads
    qh = q.reshape(b, nq, heads, d).transpose(1, 2)
    kh = k.reshape(b, nk, heads, d).transpose(1, 2)
    vh = v.reshape(b, nk, heads, d).transpose(1, 2)
    attn = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = (attn @ vh).transpose(1, 2).reshape(b, nq, c)
    return out, attn


def sca_forward(f_in: torch.Tensor, f_sem: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor,
                heads: int = 1, return_attention: bool = False):
    """Backbone features query key/value projections of the pooled semantic map.

    Queries are the input features themselves (no projection); ``w_k`` and
    ``w_v`` map the semantic channels to the input channel count.
    """
    if f_in.shape[0] != f_sem.shape[0] or f_in.shape[2:] != f_sem.shape[2:]:
        raise ShapeError(f"SCA inputs differ in batch/spatial shape: {tuple(f_in.shape)} vs {tuple(f_sem.shape)}")
    b, c, h, w = f_in.shape
    if w_k.shape != (c, f_sem.shape[1]) or w_v.shape != (c, f_sem.shape[1]):
        raise ShapeError(f"SCA projections must be [{c}, {f_sem.shape[1]}]")
    if c % heads:
        raise ShapeError(f"{c} channels cannot be split into {heads} heads")
    q = f_in.reshape(b, c, h * w).transpose(1, 2)
    sem = f_sem.reshape(b, f_sem.shape[1], h * w).transpose(1, 2)
    out, attn = multihead_attention(q, sem @ w_k.T, sem @ w_v.T, heads)
    out = out.transpose(1, 2).reshape(b, c, h, w)
    return (out, attn) if return_attention else out


class SCA(nn.Module):
    def __init__(self, channels: int, semantic_channels: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.w_k = nn.Parameter(torch.empty(channels, semantic_channels))
        self.w_v = nn.Parameter(torch.empty(channels, semantic_channels))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.trunc_normal_(self.w_k, std=0.02)
        nn.init.trunc_normal_(self.w_v, std=0.02)

    def forward(self, f_in: torch.Tensor, f_sem: torch.Tensor) -> torch.Tensor:
        return sca_forward(f_in, f_sem, self.w_k, self.w_v, self.heads)


# ------------------------------------------------------- degradation prompt

def degradation_prompt(f_d: torch.Tensor, bank: torch.Tensor, mlp_weights: nn.Module, mlp_out: nn.Module,
                       return_weights: bool = False):
    """``F_p = MLP_2(sum_i P_i * softmax(MLP_1(F_d))_i)``."""
    if f_d.shape[-1] != 512:
        raise ShapeError(f"degradation embedding must have length 512, got {f_d.shape[-1]}")
    logits = mlp_weights(f_d)
    if logits.shape[-1] != bank.shape[0]:
        raise ShapeError(f"{logits.shape[-1]} prompt logits for a bank of {bank.shape[0]}")
    weights = torch.softmax(logits, dim=-1)
    f_p = mlp_out(weights @ bank)
    return (f_p, weights) if return_weights else f_p


class PromptGenerator(nn.Module):
    def __init__(self, n_prompts: int, prompt_dim: int, embed_dim: int = 512):
        super().__init__()
        self.bank = nn.Parameter(torch.empty(n_prompts, prompt_dim))
        self.mlp_weights = MLP(embed_dim, n_prompts)
        self.mlp_out = MLP(prompt_dim, prompt_dim)
        nn.init.uniform_(self.bank)

    def forward(self, f_d: torch.Tensor, return_weights: bool = False):
        return degradation_prompt(f_d, self.bank, self.mlp_weights, self.mlp_out, return_weights)


# ----------------------------------------------------------------------- DAM

def content_tokens(f_c: torch.Tensor, n_tokens: int) -> torch.Tensor:
    """Split ``[B, 512]`` embeddings into ``[B, n_tokens, 512 / n_tokens]``."""
    b, d = f_c.shape
    return f_c.reshape(b, n_tokens, d // n_tokens)


def degradation_mask(f_p: torch.Tensor, mlp_mask: nn.Module, base: int, size: Tuple[int, int]) -> torch.Tensor:
    """Sigmoid of ``base x base`` logits predicted from ``F_p``, resized to ``size``."""
    logits = mlp_mask(f_p).reshape(f_p.shape[0], 1, base, base)
    if tuple(size) != (base, base):
        logits = F.interpolate(logits, size=tuple(size), mode="bilinear", align_corners=False)
    return torch.sigmoid(logits)


class DAM(nn.Module):
    """Degradation-aware modulation.

    ``content_role="key_value"`` treats ``F_c`` (split into ``content_tokens``
    tokens) as keys/values and the projected features as queries.  With a
    single token the softmax weight is identically one, so the block
    broadcasts ``W_v F_c`` and no key projection is created.
    ``content_role="query"`` uses ``F_c`` tokens as queries over the feature
    positions and broadcasts the token-averaged result.
    """

    def __init__(self, channels: int, prompt_dim: int, heads: int = 1, embed_dim: int = 512,
                 mask_base: int = 8, content_role: str = "key_value", content_tokens: int = 1):
        super().__init__()
        if content_role not in ("key_value", "query"):
            raise ValidationError(f"content_role must be key_value or query, got {content_role!r}")
        if embed_dim % content_tokens:
            raise ValidationError("content_tokens must divide the embedding length")
        self.heads = heads
        self.mask_base = mask_base
        self.content_role = content_role
        self.content_tokens = content_tokens
        self.embed_dim = embed_dim
        token_dim = embed_dim // content_tokens
        self.norm = ChannelLayerNorm(channels)
        self.proj = nn.Conv2d(channels, channels, 1)
        if content_role == "key_value":
            self.w_k = nn.Linear(token_dim, channels, bias=False) if content_tokens > 1 else None
            self.w_v = nn.Linear(token_dim, channels, bias=False)
            self.w_q = None
        else:
            self.w_q = nn.Linear(token_dim, channels, bias=False)
            self.w_k = nn.Conv2d(channels, channels, 1, bias=False)
            self.w_v = nn.Conv2d(channels, channels, 1, bias=False)
        self.mlp_mask = MLP(prompt_dim, mask_base * mask_base)
        self.fuse = nn.Conv2d(2 * channels, channels, 1, bias=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.zeros_(self.fuse.weight)

    def project(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.norm(x))

    def cross_attention(self, x_hat: torch.Tensor, f_c: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x_hat.shape
        tokens = content_tokens(f_c, self.content_tokens)
        if self.content_role == "key_value":
            v = self.w_v(tokens)                                       # [B, T, C]
            if self.w_k is None:
                return v[:, 0, :, None, None].expand(b, c, h, w)
            q = x_hat.reshape(b, c, h * w).transpose(1, 2)
            out, _ = multihead_attention(q, self.w_k(tokens), v, self.heads)
            return out.transpose(1, 2).reshape(b, c, h, w)
        q = self.w_q(tokens)
        k = self.w_k(x_hat).reshape(b, c, h * w).transpose(1, 2)
        v = self.w_v(x_hat).reshape(b, c, h * w).transpose(1, 2)
        out, _ = multihead_attention(q, k, v, self.heads)             # [B, T, C]
        return out.mean(1)[:, :, None, None].expand(b, c, h, w)

    def forward(self, x: torch.Tensor, f_c: torch.Tensor, f_p: torch.Tensor,
                return_parts: bool = False):
        if f_c.shape[-1] != self.embed_dim:
            raise ShapeError(f"content embedding has length {f_c.shape[-1]}")
        if f_p.shape[-1] != self.mlp_mask.fc1.in_features:
            raise ShapeError(f"prompt has length {f_p.shape[-1]}, expected {self.mlp_mask.fc1.in_features}")
        x_hat = self.project(x)
        x_att = self.cross_attention(x_hat, f_c)
        m_d = degradation_mask(f_p, self.mlp_mask, self.mask_base, x.shape[2:])
        f_m = m_d * x_hat
        out = self.fuse(torch.cat([x_att, f_m], dim=1))
        if return_parts:
            return out, {"x_hat": x_hat, "x_att": x_att, "mask": m_d, "f_m": f_m}
        return out


def dam_forward(x: torch.Tensor, f_c: torch.Tensor, f_p: torch.Tensor, block: DAM,
                return_parts: bool = False):
    return block(x, f_c, f_p, return_parts)


def free_parameter(*shape: int) -> nn.Parameter:
    """Learnable stand-in for a disabled guidance signal."""
    p = nn.Parameter(torch.empty(*shape))
    nn.init.trunc_normal_(p, std=0.02)
    return p

