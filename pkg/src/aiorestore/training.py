"""Training loop: batch sampling, AdamW steps, checkpoints and exact resumption.

Every source of randomness in a step (crop positions, flips, mask dropout,
augmentation noise) is derived from ``(seed, iteration)``, so a run resumed
from a checkpoint replays exactly the steps an uninterrupted run would take.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from . import io as imio
from .backbone import RestorationModel, build_model
from .config import ModelConfig, dump_config, parse_config
from .exceptions import CheckpointError, DatasetError, IntegrityError, ShapeError, TrainingError
from .guidance.providers import GuidanceBundle, Region, StubProviders, collate_guidance
from .icrm import AugmentationPolicy, LossBreakdown, gamma_at, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AIOCKPT\x00"
CHECKPOINT_VERSION = 1

# Fields that change parameter shapes or wiring; a checkpoint only loads into
# a config that agrees on all of them.
ARCHITECTURE_FIELDS = (
    "level_depths", "level_heads", "level_channels", "ffn_expansion", "injection_plan", "perception_order",
    "prompt_count", "embed_dims", "mask_base_resolution", "dam_content_role", "dam_content_tokens",
    "use_quality", "use_semantic", "use_task",
)


def step_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed) & ((1 << 63) - 1), int(iteration)]).generate_state(1)[0])


class CropPair(NamedTuple):
    degraded: np.ndarray
    clean: np.ndarray
    image_id: str
    region: Optional[Region]


class ImageCache:
    """Lazily loads manifest images once per path."""

    def __init__(self):
        self._images: Dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._images:
            try:
                self._images[path] = imio.read_image(path)
            except OSError as exc:
                raise DatasetError(f"cannot read image {path}: {exc}") from exc
        return self._images[path]

    def put(self, path: str, img: np.ndarray) -> None:
        self._images[path] = img


_DEFAULT_CACHE = ImageCache()


def image_id(row: imio.ManifestRow) -> str:
    """Identifier used by file-backed providers: the degraded file's stem."""
    return Path(row.degraded).stem


def _pad_to(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    ph, pw = max(size - h, 0), max(size - w, 0)
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return img


def sample_batch(manifest: Sequence[imio.ManifestRow], crop: int, batch: int, seed: int,
                 cache: Optional[ImageCache] = None) -> List[CropPair]:
    """Draw ``batch`` aligned (degraded, clean) crops with random flips."""
    if not manifest:
        raise DatasetError("manifest is empty")
    cache = cache or _DEFAULT_CACHE
    rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))
    out = []
    for _ in range(int(batch)):
        row = manifest[int(rng.integers(len(manifest)))]
        deg, clean = cache.get(row.degraded), cache.get(row.clean)
        if deg.shape != clean.shape:
            raise DatasetError(f"{row.degraded} and {row.clean} differ in shape: {deg.shape} vs {clean.shape}")
        padded = min(deg.shape[1:]) < crop
        deg, clean = _pad_to(deg, crop), _pad_to(clean, crop)
        _, h, w = deg.shape
        top = int(rng.integers(h - crop + 1))
        left = int(rng.integers(w - crop + 1))
        flip_h, flip_v = bool(rng.random() < 0.5), bool(rng.random() < 0.5)
        d = deg[:, top:top + crop, left:left + crop]
        c = clean[:, top:top + crop, left:left + crop]
        if flip_h:
            d, c = d[:, :, ::-1], c[:, :, ::-1]
        if flip_v:
            d, c = d[:, ::-1, :], c[:, ::-1, :]
        region = None if padded else Region(top, left, crop, crop, flip_h, flip_v)
        out.append(CropPair(np.ascontiguousarray(d), np.ascontiguousarray(c), image_id(row), region))
    return out


def prepare_batch(pairs: Sequence[CropPair], providers, dtype: torch.dtype = torch.float32,
                  dropout_rate: float = 0.0, seed: int = 0) -> Tuple[torch.Tensor, torch.Tensor, GuidanceBundle]:
    guides = [providers.guidance(p.degraded, p.image_id, p.region) for p in pairs]
    x = torch.as_tensor(np.stack([p.degraded for p in pairs]), dtype=dtype)
    y = torch.as_tensor(np.stack([p.clean for p in pairs]), dtype=dtype)
    return x, y, collate_guidance(guides, dtype, dropout_rate, seed)


@dataclass
class TrainState:
    model: RestorationModel
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    seed: int = 0

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def rng_state(self) -> dict:
        return {"seed": self.seed}


def make_optimizer(model: torch.nn.Module, cfg: ModelConfig) -> torch.optim.AdamW:
    opt = cfg.optimizer
    return torch.optim.AdamW(model.parameters(), lr=opt.learning_rate, betas=(opt.beta1, opt.beta2),
                             eps=1e-8, weight_decay=opt.weight_decay)


def new_train_state(cfg: ModelConfig, seed: Optional[int] = None, in_channels: int = 3) -> TrainState:
    seed = cfg.seed if seed is None else int(seed)
    model = build_model(cfg, seed, in_channels)
    return TrainState(model, make_optimizer(model, cfg), 0, seed)


def learning_rate_at(cfg: ModelConfig, iteration: int) -> float:
    opt = cfg.optimizer
    if opt.lr_schedule == "cosine" and opt.total_iterations > 0:
        frac = min(iteration / opt.total_iterations, 1.0)
        return opt.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))
    return opt.learning_rate


@dataclass(frozen=True)
class LossConfig:
    alpha: float
    gamma: float
    policy: AugmentationPolicy
    use_internal: bool = True

    @classmethod
    def from_config(cls, cfg: ModelConfig, iteration: int = 0) -> "LossConfig":
        return cls(cfg.loss_alpha, gamma_at(cfg, iteration), AugmentationPolicy.from_config(cfg), cfg.use_icrm)


def train_step(state: TrainState, batch: Sequence[CropPair], providers,
               loss_cfg: Optional[LossConfig] = None) -> Tuple[TrainState, LossBreakdown]:
    """One forward (mask dropout on), one loss evaluation and one AdamW update."""
    cfg = state.config
    model = state.model
    loss_cfg = loss_cfg or LossConfig.from_config(cfg, state.iteration)
    seed = step_seed(state.seed, state.iteration)
    dtype = next(model.parameters()).dtype
    model.train()
    x, y, g = prepare_batch(batch, providers, dtype, cfg.mask_dropout_rate, seed)
    out = model(x, g)
    loss = total_loss(out, y, loss_cfg.alpha, loss_cfg.gamma, loss_cfg.policy, seed, loss_cfg.use_internal)
    if not torch.isfinite(loss.total):
        raise TrainingError(f"non-finite loss at iteration {state.iteration}")
    for group in state.optimizer.param_groups:
        group["lr"] = learning_rate_at(cfg, state.iteration)
    state.optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    if cfg.optimizer.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optimizer.grad_clip)
    state.optimizer.step()
    state.iteration += 1
    return state, loss.item()


LossCallback = Callable[[int, LossBreakdown], None]


def run_training(state: TrainState, manifest: Sequence[imio.ManifestRow], providers=None,
                 until: Optional[int] = None, on_step: Optional[LossCallback] = None,
                 on_checkpoint: Optional[Callable[[TrainState], None]] = None,
                 cache: Optional[ImageCache] = None) -> TrainState:
    """Advance ``state`` to iteration ``until`` (default: the configured total)."""
    cfg = state.config
    providers = providers or StubProviders.from_config(cfg)
    cache = cache or ImageCache()
    until = cfg.optimizer.total_iterations if until is None else int(until)
    while state.iteration < until:
        batch = sample_batch(manifest, cfg.crop_size, cfg.optimizer.batch_size,
                             step_seed(state.seed, state.iteration) ^ 0x5A5A, cache)
        state, lb = train_step(state, batch, providers)
        if on_step is not None:
            on_step(state.iteration, lb)
        if on_checkpoint is not None and (state.iteration % cfg.checkpoint_every == 0 or state.iteration == until):
            on_checkpoint(state)
    return state


def _read_curve(path: Path, keep_through: int) -> List[str]:
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    return [ln for ln in lines if ln.strip() and int(ln.split("\t", 1)[0]) <= keep_through]


def train_loop(cfg: ModelConfig, manifest, providers=None, out_dir: str | os.PathLike = "runs/train",
               resume: str | os.PathLike | None = None) -> Path:
    """Train to ``cfg.optimizer.total_iterations``, checkpointing every ``cfg.checkpoint_every``.

    Writes ``ckpt_<iteration>.ckpt`` files and ``loss_curve.tsv`` (iteration,
    l1, internal, total per line) into ``out_dir``; returns the final checkpoint.
    """
    if not isinstance(manifest, (list, tuple)):
        manifest = imio.read_manifest(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(resume, cfg) if resume else new_train_state(cfg)
    curve = out / "loss_curve.tsv"
    lines = _read_curve(curve, state.iteration)
    with open(curve, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    final = out / f"ckpt_{state.iteration:07d}.ckpt"
    if state.iteration >= cfg.optimizer.total_iterations:
        save_checkpoint(state, final)
        return final

    def on_step(it: int, lb: LossBreakdown) -> None:
        with open(curve, "a", encoding="utf-8") as fh:
            fh.write(f"{it}\t{lb.l1!r}\t{lb.internal!r}\t{lb.total!r}\n")
        if it % 100 == 0:
            log.info("iteration %d: l1=%.5f internal=%.3g total=%.5f", it, lb.l1, lb.internal, lb.total)

    saved = []

    def on_checkpoint(st: TrainState) -> None:
        path = out / f"ckpt_{st.iteration:07d}.ckpt"
        save_checkpoint(st, path)
        saved.append(path)

    run_training(state, manifest, providers, on_step=on_step, on_checkpoint=on_checkpoint)
    return saved[-1]


# ---------------------------------------------------------------- checkpoints

def _named_arrays(state: TrainState) -> Dict[str, np.ndarray]:
    arrays = {}
    for name, t in state.model.state_dict().items():
        arrays[f"model/{name}"] = t.detach().cpu().numpy()
    params = dict(state.model.named_parameters())
    for name, p in params.items():
        st = state.optimizer.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq", "step"):
            if key in st:
                arrays[f"adam/{key}/{name}"] = torch.as_tensor(st[key]).detach().cpu().numpy()
    return arrays


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    """Write a self-checking named-array container.

    Layout: magic (8 bytes) | version uint32 | header length uint64 |
    JSON header | concatenated raw arrays | SHA-256 of all preceding bytes.
    """
    arrays = _named_arrays(state)
    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config": dump_config(state.config),
        "iteration": state.iteration,
        "rng": state.rng_state,
        "in_channels": state.model.in_channels,
        "arrays": index,
    }).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + digest)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Return ``(header, arrays)`` after verifying magic, version and checksum."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if len(data) < 8 + 12 + 32 or data[:8] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint or truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (file corrupt or truncated)")
    version, hlen = struct.unpack("<IQ", body[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(body[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        raw = body[start:start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header, arrays


def check_compatible(saved: ModelConfig, cfg: ModelConfig) -> None:
    for name in ARCHITECTURE_FIELDS:
        if getattr(saved, name) != getattr(cfg, name):
            raise CheckpointError(f"checkpoint is incompatible with config: field {name!r} differs "
                                  f"({getattr(saved, name)!r} vs {getattr(cfg, name)!r})")


def load_checkpoint(path: str | os.PathLike, cfg: Optional[ModelConfig] = None) -> TrainState:
    """Rebuild a :class:`TrainState`; ``cfg`` (if given) must match the saved architecture."""
    header, arrays = read_checkpoint(path)
    saved = parse_config(header["config"])
    if cfg is not None:
        check_compatible(saved, cfg)
    cfg = cfg or saved
    seed = int(header["rng"]["seed"])
    model = build_model(cfg, seed, int(header.get("in_channels", 3)))
    sd = model.state_dict()
    for name in sd:
        key = f"model/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing array {key}")
        if tuple(arrays[key].shape) != tuple(sd[name].shape):
            raise CheckpointError(f"{path}: array {key} has shape {arrays[key].shape}, expected {tuple(sd[name].shape)}")
        sd[name] = torch.from_numpy(arrays[key])
    model.load_state_dict(sd)
    optimizer = make_optimizer(model, cfg)
    for name, p in model.named_parameters():
        st = {}
        for k in ("step", "exp_avg", "exp_avg_sq"):
            a = arrays.get(f"adam/{k}/{name}")
            if a is not None:
                st[k] = torch.from_numpy(a)
        if st:
            if set(st) != {"step", "exp_avg", "exp_avg_sq"}:
                raise CheckpointError(f"{path}: incomplete optimizer state for {name}")
            if st["exp_avg"].shape != p.shape:
                raise ShapeError(f"{path}: optimizer moment for {name} has wrong shape")
            optimizer.state[p] = st
    return TrainState(model, optimizer, int(header["iteration"]), seed)
