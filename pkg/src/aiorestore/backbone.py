"""Four-level encoder-decoder restoration transformer with guidance injection.

Each level is a stack of prompt transformer blocks (channel-wise transposed
attention followed by a gated depthwise feed-forward).  Guidance blocks are
attached after the blocks of selected stages; which family sits where is
decided by the configuration's injection plan and perception order.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import FAMILIES, PERCEPTION_FAMILY, STAGE_LEVEL, STAGES, ModelConfig
from .exceptions import GuidanceError, ShapeError, ValidationError
from .guidance.providers import GuidanceBundle
from .guidance.quality import QualityAdapter
from .modulation import (DAM, QGM, SCA, ChannelLayerNorm, PromptGenerator, downsample_segments, free_parameter,
                         mask_average_pool)
from .validation import check_image

PAD_MULTIPLE = 8


class TransposedAttention(nn.Module):
    """Attention across channels: a ``C/heads x C/heads`` map per head."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(channels, channels * 3, 1, bias=False)
        self.qkv_dw = nn.Conv2d(channels * 3, channels * 3, 3, padding=1, groups=channels * 3, bias=False)
        self.project_out = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        shape = (b, self.heads, c // self.heads, h * w)
        q = F.normalize(q.reshape(shape), dim=-1)
        k = F.normalize(k.reshape(shape), dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)
        out = (attn @ v.reshape(shape)).reshape(b, c, h, w)
        return self.project_out(out)


class GatedFeedForward(nn.Module):
    def __init__(self, channels: int, expansion: float):
        super().__init__()
        hidden = int(channels * expansion)
        self.project_in = nn.Conv2d(channels, hidden * 2, 1, bias=False)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2, bias=False)
        self.project_out = nn.Conv2d(hidden, channels, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class PromptTransformerBlock(nn.Module):
    def __init__(self, channels: int, heads: int, expansion: float):
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels)
        self.attn = TransposedAttention(channels, heads)
        self.norm2 = ChannelLayerNorm(channels)
        self.ffn = GatedFeedForward(channels, expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def _stack(n: int, channels: int, heads: int, expansion: float) -> nn.Sequential:
    return nn.Sequential(*[PromptTransformerBlock(channels, heads, expansion) for _ in range(n)])


class Downsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(cin, cout // 4, 3, padding=1, bias=False), nn.PixelUnshuffle(2))

    def forward(self, x):
        return self.body(x)


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(cin, cout * 4, 3, padding=1, bias=False), nn.PixelShuffle(2))

    def forward(self, x):
        return self.body(x)


def resolve_binding(plan: Dict[str, str], order: Sequence[str]) -> Dict[str, str]:
    """Assign guidance families to the plan's occupied stages in depth order.

    The plan fixes which stages carry a guidance block and how many blocks
    each family has; ``order`` (a permutation of how/where/what) decides
    which family occupies the earliest slots.
    """
    slots = [s for s in STAGES if plan.get(s, "none") != "none"]
    counts = {f: sum(1 for s in slots if plan[s] == f) for f in FAMILIES}
    sequence = [PERCEPTION_FAMILY[p] for p in order for _ in range(counts[PERCEPTION_FAMILY[p]])]
    binding = {s: "none" for s in STAGES}
    binding.update(zip(slots, sequence))
    return binding


def _pad_mode(size: int, pad: int) -> str:
    return "reflect" if pad < size else "replicate"


class RestorationModel(nn.Module):
    def __init__(self, config: ModelConfig, in_channels: int = 3):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        ch, hd, dp, ex = config.level_channels, config.level_heads, config.level_depths, config.ffn_expansion
        self.patch_embed = nn.Conv2d(in_channels, ch[0], 3, padding=1, bias=False)
        self.encoders = nn.ModuleList([_stack(dp[i], ch[i], hd[i], ex) for i in range(3)])
        self.downs = nn.ModuleList([Downsample(ch[i], ch[i + 1]) for i in range(3)])
        self.latent = _stack(dp[3], ch[3], hd[3], ex)
        # decoder index i rebuilds level i (0-based), from the top down
        self.ups = nn.ModuleList([Upsample(ch[i + 1], ch[i]) for i in range(3)])
        self.reduces = nn.ModuleList([nn.Conv2d(2 * ch[i], ch[i], 1, bias=False) for i in range(3)])
        self.decoders = nn.ModuleList([_stack(dp[i], ch[i], hd[i], ex) for i in range(3)])
        self.output = nn.Conv2d(ch[0], in_channels, 3, padding=1)

        dims = config.embed_dims
        if config.use_quality:
            self.adapter = QualityAdapter(dims.quality, dims.adapter)
        else:
            self.quality_free = free_parameter(dims.adapter)
        if not config.use_semantic:
            self.semantic_free = free_parameter(ch[0])
        if config.use_task:
            self.prompt = PromptGenerator(config.prompt_count, dims.prompt, dims.clip)
        else:
            self.prompt_free = free_parameter(dims.prompt)
            self.content_free = free_parameter(dims.clip)
        self.binding: Dict[str, str] = {}
        self.guidance_blocks = nn.ModuleDict()
        self._bind(resolve_binding(config.injection_plan, config.perception_order))

    # ------------------------------------------------------------ binding

    def _make_block(self, stage: str, family: str) -> nn.Module:
        cfg = self.config
        lvl = STAGE_LEVEL[stage]
        c, h = cfg.level_channels[lvl], cfg.level_heads[lvl]
        if family == "qgm":
            block = QGM(c, cfg.embed_dims.adapter)
        elif family == "sca":
            block = SCA(c, cfg.level_channels[0], h)
        else:
            block = DAM(c, cfg.embed_dims.prompt, h, cfg.embed_dims.clip, cfg.mask_base_resolution,
                        cfg.dam_content_role, cfg.dam_content_tokens)
        init_weights(block)
        return block

    def _bind(self, binding: Dict[str, str], previous: Optional[Dict[str, nn.Module]] = None) -> None:
        previous = previous or {}
        self.binding = dict(binding)
        self.guidance_blocks = nn.ModuleDict()
        used = {f: 0 for f in FAMILIES}
        for stage in STAGES:
            fam = binding[stage]
            if fam == "none":
                continue
            block = self._make_block(stage, fam)
            old = previous.get((fam, used[fam]))
            used[fam] += 1
            if old is not None:
                src = old.state_dict()
                dst = block.state_dict()
                if src.keys() == dst.keys() and all(src[k].shape == dst[k].shape for k in src):
                    block.load_state_dict(src)
            self.guidance_blocks[stage] = block

    def family_blocks(self) -> Dict[tuple, nn.Module]:
        used = {f: 0 for f in FAMILIES}
        out = {}
        for stage in STAGES:
            if stage in self.guidance_blocks:
                fam = self.binding[stage]
                out[(fam, used[fam])] = self.guidance_blocks[stage]
                used[fam] += 1
        return out

    # ------------------------------------------------------------ forward

    def _check_guidance(self, g: GuidanceBundle) -> None:
        cfg = self.config
        for stage in STAGES:
            fam = self.binding[stage]
            if fam == "qgm" and cfg.use_quality and g.quality is None:
                raise GuidanceError(f"stage {stage}: QGM needs a quality embedding")
            if fam == "sca" and cfg.use_semantic and g.segments is None:
                raise GuidanceError(f"stage {stage}: SCA needs semantic masks")
            if fam == "dam" and cfg.use_task and (g.content is None or g.degradation is None):
                raise GuidanceError(f"stage {stage}: DAM needs content and degradation embeddings")

    def _guide(self, stage: str, x: torch.Tensor, ctx: dict) -> torch.Tensor:
        block = self.guidance_blocks[stage] if stage in self.guidance_blocks else None
        if block is None:
            return x
        fam = self.binding[stage]
        if fam == "qgm":
            return block(x, ctx["f_q"])
        if fam == "sca":
            return x + block(x, self._semantic_map(x, ctx))
        return x + block(x, ctx["f_c"], ctx["f_p"])

    def _semantic_map(self, x: torch.Tensor, ctx: dict) -> torch.Tensor:
        b, _, h, w = x.shape
        if not self.config.use_semantic:
            return self.semantic_free[None, :, None, None].expand(b, -1, h, w)
        factor = ctx["f_s"].shape[-1] // w
        feats = F.avg_pool2d(ctx["f_s"], factor) if factor > 1 else ctx["f_s"]
        return mask_average_pool(feats, downsample_segments(ctx["segments"], factor))

    def forward(self, x: torch.Tensor, guidance: Optional[GuidanceBundle] = None) -> torch.Tensor:
        """Restore a ``[B, C, H, W]`` batch; returns ``clamp(x + residual, 0, 1)``."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected [B, {self.in_channels}, H, W] input, got {tuple(x.shape)}")
        g = guidance or GuidanceBundle()
        self._check_guidance(g)
        b, _, h, w = x.shape
        ph, pw = (-h) % PAD_MULTIPLE, (-w) % PAD_MULTIPLE
        mode = _pad_mode(min(h, w), max(ph, pw))
        xp = F.pad(x, (0, pw, 0, ph), mode=mode) if ph or pw else x
        segments = g.segments if self.config.use_semantic else None
        if segments is not None:
            if tuple(segments.shape) != (b, h, w):
                raise ShapeError(f"segments {tuple(segments.shape)} do not match input {(b, h, w)}")
            if ph or pw:
                np_mode = "reflect" if mode == "reflect" else "edge"
                segments = torch.from_numpy(np.pad(segments.numpy(), ((0, 0), (0, ph), (0, pw)), mode=np_mode))

        cfg = self.config
        ctx = {}
        if cfg.use_quality:
            ctx["f_q"] = self.adapter(g.quality) if g.quality is not None else None
        else:
            ctx["f_q"] = self.quality_free[None].expand(b, -1)
        if cfg.use_task:
            if g.degradation is not None:
                ctx["f_p"] = self.prompt(g.degradation)
            ctx["f_c"] = g.content
        else:
            ctx["f_p"] = self.prompt_free[None].expand(b, -1)
            ctx["f_c"] = self.content_free[None].expand(b, -1)
        ctx["segments"] = segments

        f_s = self.patch_embed(xp)
        ctx["f_s"] = f_s
        skips: List[torch.Tensor] = []
        feat = f_s
        for i, stage in enumerate(("enc1", "enc2", "enc3")):
            feat = self._guide(stage, self.encoders[i](feat), ctx)
            skips.append(feat)
            feat = self.downs[i](feat)
        feat = self._guide("latent", self.latent(feat), ctx)
        for i, stage in zip((2, 1, 0), ("dec3", "dec2", "dec1")):
            feat = self.reduces[i](torch.cat([self.ups[i](feat), skips[i]], dim=1))
            feat = self._guide(stage, self.decoders[i](feat), ctx)
        residual = self.output(feat)[:, :, :h, :w]
        return torch.clamp(x + residual, 0.0, 1.0)


def init_weights(module: nn.Module) -> None:
    """Truncated-normal projections, zero biases, then block-specific overrides."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, (QGM, DAM, SCA)):
            m.reset_parameters()


def build_model(config: ModelConfig, seed: Optional[int] = None, in_channels: int = 3) -> RestorationModel:
    """Deterministically build and initialize a model for ``config``."""
    seed = config.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = RestorationModel(config, in_channels)
        init_weights(model)
        nn.init.zeros_(model.output.weight)
        nn.init.zeros_(model.output.bias)
    return model


def set_perception_order(model: RestorationModel, order: Sequence[str]) -> RestorationModel:
    """Rebind guidance families so they act in ``order`` along network depth.

    Blocks keep their parameters when the k-th block of a family lands on a
    stage with the same shapes; otherwise the block is freshly initialized.
    """
    order = tuple(o.lower() for o in order)
    if sorted(order) != sorted(PERCEPTION_FAMILY):
        raise ValidationError(f"order must permute how/where/what, got {order}")
    previous = model.family_blocks()
    model.config = model.config.replace(perception_order=order)
    dtype = next(model.parameters()).dtype
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(model.config.seed) + 1)
        model._bind(resolve_binding(model.config.injection_plan, order), previous)
    model.to(dtype)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def as_batch(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        return img[None] if img.ndim == 3 else img
    return torch.as_tensor(check_image(img))[None]


def forward(model: RestorationModel, img, guidance: Optional[GuidanceBundle] = None) -> np.ndarray:
    """Restore a single ``[C, H, W]`` image and return it as a numpy array."""
    x = as_batch(img).to(next(model.parameters()).dtype)
    with torch.no_grad():
        out = model(x, None if guidance is None else guidance.to(x.dtype))
    return out[0].double().numpy()
