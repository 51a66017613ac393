"""Model/training configuration and its flat ``key = value`` text format.

The format is one assignment per line, lines starting with ``#`` are comments, nested records
use dotted keys (``optimizer.learning_rate = 2e-4``) and lists are comma
separated (``level_depths = 3, 5, 6, 8``).  Keys that are not set keep the
defaults of :class:`ModelConfig`.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping, Tuple

from .exceptions import ConfigError, ValidationError

STAGES = ("enc1", "enc2", "enc3", "latent", "dec3", "dec2", "dec1")
STAGE_LEVEL = {"enc1": 0, "enc2": 1, "enc3": 2, "latent": 3, "dec3": 2, "dec2": 1, "dec1": 0}
FAMILIES = ("qgm", "sca", "dam")
# perception stage -> guidance family
PERCEPTION_FAMILY = {"how": "qgm", "where": "sca", "what": "dam"}
PHOTOMETRIC_OPS = ("brightness", "contrast", "noise", "blur", "offset")

DEFAULT_QUALITY_TEXT = "Rate the overall quality of this image and describe its degradations."

DEFAULT_PLAN = {
    "enc1": "none",
    "enc2": "qgm",
    "enc3": "sca",
    "latent": "dam",
    "dec3": "dam",
    "dec2": "none",
    "dec1": "none",
}

DEFAULT_WEAK = (("brightness", 0.02), ("noise", 2.0 / 255.0))
DEFAULT_STRONG = (("brightness", 0.1), ("contrast", 0.1), ("noise", 10.0 / 255.0), ("blur", 1.0))


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    learning_rate: float = 2e-4
    batch_size: int = 4
    total_iterations: int = 300_000
    weight_decay: float = 1e-4
    lr_schedule: str = "constant"
    grad_clip: float = 0.0


@dataclass(frozen=True)
class EmbedDims:
    quality: int = 256
    clip: int = 512
    prompt: int = 64
    adapter: int = 64


@dataclass(frozen=True)
class ModelConfig:
    level_depths: Tuple[int, ...] = (3, 5, 6, 8)
    level_heads: Tuple[int, ...] = (1, 2, 4, 8)
    level_channels: Tuple[int, ...] = (48, 96, 192, 384)
    ffn_expansion: float = 2.66
    injection_plan: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_PLAN))
    perception_order: Tuple[str, ...] = ("how", "where", "what")
    loss_alpha: float = 0.25
    loss_gamma: float = 0.05
    gamma_schedule: str = "constant"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    crop_size: int = 256
    mask_dropout_rate: float = 0.3
    prompt_count: int = 5
    embed_dims: EmbedDims = field(default_factory=EmbedDims)
    mask_base_resolution: int = 8
    dam_content_role: str = "key_value"
    dam_content_tokens: int = 1
    use_quality: bool = True
    use_semantic: bool = True
    use_task: bool = True
    use_icrm: bool = True
    quality_text: str = DEFAULT_QUALITY_TEXT
    semantic_mode: str = "grid"
    semantic_cells: int = 4
    augment_weak: Tuple[Tuple[str, float], ...] = DEFAULT_WEAK
    augment_strong: Tuple[Tuple[str, float], ...] = DEFAULT_STRONG
    augment_clamp: bool = True
    experimental_lambda1: float = 0.1
    experimental_lambda2: float = 0.05
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        for name in ("level_depths", "level_heads", "level_channels", "perception_order"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        unknown = set(self.injection_plan) - set(STAGES)
        if unknown:
            raise ValidationError(f"unknown injection stage(s): {sorted(unknown)}")
        plan = {s: str(self.injection_plan.get(s, DEFAULT_PLAN[s])).lower() for s in STAGES}
        object.__setattr__(self, "injection_plan", plan)
        for name in ("augment_weak", "augment_strong"):
            object.__setattr__(self, name, tuple((str(k), float(m)) for k, m in getattr(self, name)))
        validate_config(self)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def with_optimizer(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, optimizer=dataclasses.replace(self.optimizer, **changes))

    def with_embed_dims(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, embed_dims=dataclasses.replace(self.embed_dims, **changes))


def validate_config(cfg: ModelConfig) -> None:
    """Raise :class:`ValidationError` if ``cfg`` breaks an invariant."""
    for name in ("level_depths", "level_heads", "level_channels"):
        values = getattr(cfg, name)
        if len(values) != 4:
            raise ValidationError(f"{name} must have exactly 4 entries, got {len(values)}")
        if any(int(v) != v or v < 1 for v in values):
            raise ValidationError(f"{name} entries must be positive integers: {values}")
    ch = cfg.level_channels
    if any(b < a for a, b in zip(ch, ch[1:])):
        raise ValidationError(f"level_channels must be non-decreasing: {ch}")
    for c, h in zip(ch, cfg.level_heads):
        if c % h:
            raise ValidationError(f"channels {c} not divisible by heads {h}")
    for c in ch[1:]:
        # pixel-unshuffle downsampling emits c/4 channels before the shuffle
        if c % 4:
            raise ValidationError(f"channels {c} of levels 2-4 must be divisible by 4")
    if cfg.ffn_expansion <= 0:
        raise ValidationError("ffn_expansion must be positive")
    if sorted(cfg.perception_order) != sorted(PERCEPTION_FAMILY) or len(cfg.perception_order) != 3:
        raise ValidationError(f"perception_order must permute how/where/what: {cfg.perception_order}")
    for stage, fam in cfg.injection_plan.items():
        if stage not in STAGES:
            raise ValidationError(f"unknown injection stage {stage!r}")
        if fam not in FAMILIES + ("none",):
            raise ValidationError(f"injection_plan.{stage}: unknown block {fam!r}")
    if cfg.loss_alpha < 0 or cfg.loss_gamma < 0:
        raise ValidationError("loss_alpha and loss_gamma must be >= 0")
    if cfg.gamma_schedule not in ("constant", "linear_decay"):
        raise ValidationError(f"gamma_schedule: {cfg.gamma_schedule!r}")
    opt = cfg.optimizer
    if not (0 <= opt.beta1 < 1 and 0 <= opt.beta2 < 1):
        raise ValidationError("optimizer betas must lie in [0, 1)")
    if opt.learning_rate < 0 or opt.weight_decay < 0 or opt.grad_clip < 0:
        raise ValidationError("learning_rate, weight_decay and grad_clip must be >= 0")
    if opt.batch_size < 1 or opt.total_iterations < 0:
        raise ValidationError("batch_size must be >= 1 and total_iterations >= 0")
    if opt.lr_schedule not in ("constant", "cosine"):
        raise ValidationError(f"optimizer.lr_schedule: {opt.lr_schedule!r}")
    if cfg.crop_size < 1:
        raise ValidationError("crop_size must be positive")
    if not 0.0 <= cfg.mask_dropout_rate <= 1.0:
        raise ValidationError("mask_dropout_rate must lie in [0, 1]")
    if cfg.prompt_count < 1:
        raise ValidationError("prompt_count must be >= 1")
    dims = cfg.embed_dims
    if dims.clip != 512:
        raise ValidationError("embed_dims.clip is fixed at 512")
    if min(dims.quality, dims.prompt, dims.adapter) < 1:
        raise ValidationError("embedding dimensions must be positive")
    if cfg.mask_base_resolution < 1:
        raise ValidationError("mask_base_resolution must be positive")
    if cfg.dam_content_role not in ("key_value", "query"):
        raise ValidationError(f"dam_content_role: {cfg.dam_content_role!r}")
    if cfg.dam_content_tokens < 1 or dims.clip % cfg.dam_content_tokens:
        raise ValidationError("dam_content_tokens must divide 512")
    if cfg.semantic_mode not in ("grid", "quantile") or cfg.semantic_cells < 1:
        raise ValidationError("semantic_mode must be grid|quantile with semantic_cells >= 1")
    if not (cfg.use_quality or cfg.use_semantic or cfg.use_task or cfg.use_icrm):
        raise ValidationError("at least one of quality/semantic/task/icrm must stay enabled")
    if cfg.checkpoint_every < 1:
        raise ValidationError("checkpoint_every must be >= 1")
    for name in ("augment_weak", "augment_strong"):
        for kind, mag in getattr(cfg, name):
            if kind not in PHOTOMETRIC_OPS:
                raise ValidationError(f"{name}: {kind!r} is not a photometric op")
            if mag < 0 or not math.isfinite(mag):
                raise ValidationError(f"{name}: magnitude of {kind} must be finite and >= 0")
    strong = dict(cfg.augment_strong)
    for kind, mag in cfg.augment_weak:
        if strong.get(kind, -1.0) < mag:
            raise ValidationError(f"augment.strong must cover the weak {kind} range")


def desk_scale_preset() -> ModelConfig:
    """A configuration that trains on one CPU in minutes."""
    cfg = ModelConfig(
        level_depths=(1, 1, 1, 1),
        level_heads=(1, 1, 2, 2),
        level_channels=(8, 16, 16, 32),
        crop_size=64,
        checkpoint_every=500,
    )
    return cfg.with_optimizer(batch_size=2, total_iterations=2000)


def full_preset() -> ModelConfig:
    return ModelConfig()


# ---------------------------------------------------------------- text format

def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int(text: str) -> int:
    value = float(text) if any(c in text for c in ".eE") else int(text)
    if int(value) != value:
        raise ValueError(f"not an integer: {text!r}")
    return int(value)


def _unbracket(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] in "[(" and text[-1] in "])":
        return text[1:-1]
    return text


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(_parse_int(p.strip()) for p in _unbracket(text).split(",") if p.strip())


def _word_list(text: str) -> Tuple[str, ...]:
    return tuple(p.strip().lower() for p in _unbracket(text).replace("-", ",").split(",") if p.strip())


def _ops(text: str) -> Tuple[Tuple[str, float], ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    out = []
    for item in text.split(","):
        kind, _, mag = item.strip().partition(":")
        if not _:
            raise ValueError(f"expected kind:magnitude, got {item!r}")
        out.append((kind.strip(), float(mag)))
    return tuple(out)


def _fmt_ops(ops) -> str:
    return ", ".join(f"{k}:{m!r}" for k, m in ops) if ops else "none"


_Field = Tuple[Callable[[str], Any], Callable[[Any], str]]
_FLOAT: _Field = (float, repr)
_INT: _Field = (_parse_int, str)
_BOOL: _Field = (_parse_bool, lambda b: "true" if b else "false")
_STR: _Field = (str, str)
_INTS: _Field = (_int_list, lambda v: ", ".join(map(str, v)))

_TOP: Dict[str, _Field] = {
    "level_depths": _INTS,
    "level_heads": _INTS,
    "level_channels": _INTS,
    "ffn_expansion": _FLOAT,
    "perception_order": (_word_list, lambda v: ", ".join(v)),
    "loss_alpha": _FLOAT,
    "loss_gamma": _FLOAT,
    "gamma_schedule": _STR,
    "crop_size": _INT,
    "mask_dropout_rate": _FLOAT,
    "prompt_count": _INT,
    "mask_base_resolution": _INT,
    "dam_content_role": _STR,
    "dam_content_tokens": _INT,
    "use_quality": _BOOL,
    "use_semantic": _BOOL,
    "use_task": _BOOL,
    "use_icrm": _BOOL,
    "quality_text": _STR,
    "semantic_mode": _STR,
    "semantic_cells": _INT,
    "augment.weak": (_ops, _fmt_ops),
    "augment.strong": (_ops, _fmt_ops),
    "augment.clamp": _BOOL,
    "experimental_lambda1": _FLOAT,
    "experimental_lambda2": _FLOAT,
    "seed": _INT,
    "checkpoint_every": _INT,
}
_ATTR = {"augment.weak": "augment_weak", "augment.strong": "augment_strong", "augment.clamp": "augment_clamp"}
_OPTIMIZER: Dict[str, _Field] = {
    "beta1": _FLOAT,
    "beta2": _FLOAT,
    "learning_rate": _FLOAT,
    "batch_size": _INT,
    "total_iterations": _INT,
    "weight_decay": _FLOAT,
    "lr_schedule": _STR,
    "grad_clip": _FLOAT,
}
_EMBED: Dict[str, _Field] = {"quality": _INT, "clip": _INT, "prompt": _INT, "adapter": _INT}


def parse_config(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse configuration text on top of ``base`` (full-scale defaults if omitted)."""
    base = base or ModelConfig()
    top: Dict[str, Any] = {}
    opt: Dict[str, Any] = {}
    emb: Dict[str, Any] = {}
    plan = dict(base.injection_plan)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        try:
            if key in _TOP:
                top[_ATTR.get(key, key)] = _TOP[key][0](value)
            elif key.startswith("optimizer.") and key[10:] in _OPTIMIZER:
                opt[key[10:]] = _OPTIMIZER[key[10:]][0](value)
            elif key.startswith("embed_dims.") and key[11:] in _EMBED:
                emb[key[11:]] = _EMBED[key[11:]][0](value)
            elif key.startswith("injection_plan."):
                stage = key[15:]
                if stage not in STAGES:
                    raise ConfigError(f"unknown config key {key!r}")
                plan[stage] = value.lower()
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r} ({exc})") from exc
    return dataclasses.replace(
        base,
        **top,
        injection_plan=plan,
        optimizer=dataclasses.replace(base.optimizer, **opt),
        embed_dims=dataclasses.replace(base.embed_dims, **emb),
    )


def load_config(path: str | os.PathLike) -> ModelConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {os.fspath(path)!r}: {exc.strerror}") from exc
    return parse_config(text)


def dump_config(cfg: ModelConfig) -> str:
    """Serialize every field; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for key, (_, fmt) in _TOP.items():
        lines.append(f"{key} = {fmt(getattr(cfg, _ATTR.get(key, key)))}")
    for key, (_, fmt) in _OPTIMIZER.items():
        lines.append(f"optimizer.{key} = {fmt(getattr(cfg.optimizer, key))}")
    for key, (_, fmt) in _EMBED.items():
        lines.append(f"embed_dims.{key} = {fmt(getattr(cfg.embed_dims, key))}")
    for stage in STAGES:
        lines.append(f"injection_plan.{stage} = {cfg.injection_plan[stage]}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ModelConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
