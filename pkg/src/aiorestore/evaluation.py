"""Per-tag PSNR/SSIM reports and the order / component ablation runners."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch

from . import io as imio
from .backbone import RestorationModel
from .config import PERCEPTION_FAMILY, ModelConfig
from .exceptions import EvaluationError, RestoreError, ValidationError
from .guidance.providers import StubProviders, collate_guidance
from .metrics import psnr, ssim
from .training import ImageCache, TrainState, image_id, load_checkpoint, new_train_state, run_training

log = logging.getLogger(__name__)


def _mean(values: Sequence[float]) -> float:
    # fsum makes the mean independent of summation order
    return math.fsum(values) / len(values) if values else math.nan


def _fmt(v: float, digits: int) -> str:
    return "inf" if math.isinf(v) else f"{v:.{digits}f}"


@dataclass(frozen=True)
class MetricRow:
    tag: str
    psnr: float
    ssim: float
    count: int = 1


@dataclass(frozen=True)
class MetricReport:
    """Per-tag mean PSNR/SSIM; ``averages`` is the unweighted mean over rows."""

    rows: Tuple[MetricRow, ...]
    averages: Tuple[float, float]
    footer: Tuple[str, ...] = ()
    images: Tuple[dict, ...] = ()
    extra_columns: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.rows:
            ep, es = _mean([r.psnr for r in self.rows]), _mean([r.ssim for r in self.rows])
            p, s = self.averages
            if not (_close(p, ep) and _close(s, es)):
                raise ValidationError(f"averages {self.averages} do not match row means {(ep, es)}")

    @classmethod
    def from_rows(cls, rows: Iterable[MetricRow], footer: Sequence[str] = (), images: Sequence[dict] = ()):
        rows = tuple(rows)
        avg = (_mean([r.psnr for r in rows]), _mean([r.ssim for r in rows]))
        return cls(rows, avg, tuple(footer), tuple(images))

    def to_text(self) -> str:
        extra = sorted(self.extra_columns)
        header = ["dataset", "n", "PSNR", "SSIM"] + extra
        body = [[r.tag, str(r.count), _fmt(r.psnr, 2), _fmt(r.ssim, 4)]
                + [_fmt(self.extra_columns[c].get(r.tag, math.nan), 3) for c in extra] for r in self.rows]
        body.append(["Average", str(sum(r.count for r in self.rows)), _fmt(self.averages[0], 2),
                     _fmt(self.averages[1], 4)] + ["" for _ in extra])
        lines = _table(header, body)
        lines += [f"note: {f}" for f in self.footer]
        return "\n".join(lines) + "\n"

    def to_records(self) -> List[dict]:
        recs = [{"kind": "row", "tag": r.tag, "count": r.count, "psnr": r.psnr, "ssim": r.ssim} for r in self.rows]
        recs.append({"kind": "average", "psnr": self.averages[0], "ssim": self.averages[1]})
        recs += [{"kind": "image", **img} for img in self.images]
        recs += [{"kind": "note", "text": f} for f in self.footer]
        return recs

    def write(self, stem: str | os.PathLike) -> Tuple[Path, Path]:
        """Write ``<stem>.txt`` and ``<stem>.ndjson``."""
        return _write_pair(stem, self.to_text(), self.to_records())


def _close(a: float, b: float) -> bool:
    if math.isinf(a) or math.isinf(b) or math.isnan(a) or math.isnan(b):
        return a == b or (math.isnan(a) and math.isnan(b))
    return abs(a - b) <= 1e-9


def _table(header: List[str], body: List[List[str]]) -> List[str]:
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                for i, (c, w) in enumerate(zip(row, widths))).rstrip()
    rule = "-" * len(fmt(header))
    return [fmt(header), rule] + [fmt(r) for r in body[:-1]] + [rule, fmt(body[-1])]


def _write_pair(stem, text: str, records: List[dict]) -> Tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    txt, nd = stem.with_suffix(".txt"), stem.with_suffix(".ndjson")
    txt.write_text(text, encoding="utf-8")
    with open(nd, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return txt, nd


def load_model(source) -> RestorationModel:
    if isinstance(source, RestorationModel):
        return source
    if isinstance(source, TrainState):
        return source.model
    return load_checkpoint(source).model


def restore_image(model: RestorationModel, img, providers, img_id: Optional[str] = None):
    """Restore one ``[C, H, W]`` image with guidance from ``providers`` (no mask dropout)."""
    dtype = next(model.parameters()).dtype
    g = collate_guidance([providers.guidance(img, img_id, None)], dtype)
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(img, dtype=dtype)[None], g)
    return out[0].double().numpy()


def evaluate(model_ckpt, manifest, providers=None, tags: Optional[Sequence[str]] = None,
             cache: Optional[ImageCache] = None) -> MetricReport:
    """Restore every manifest image one at a time and report per-tag PSNR/SSIM.

    ``tags`` lists the dataset groups expected in the report; groups with no
    images are dropped from the rows and mentioned in the footer.
    """
    model = load_model(model_ckpt)
    if not isinstance(manifest, (list, tuple)):
        manifest = imio.read_manifest(manifest)
    if not manifest:
        raise EvaluationError("manifest is empty")
    providers = providers or StubProviders.from_config(model.config)
    cache = cache or ImageCache()
    per_tag: Dict[str, List[dict]] = defaultdict(list)
    for row in manifest:
        iid = image_id(row)
        try:
            deg, clean = cache.get(row.degraded), cache.get(row.clean)
            out = restore_image(model, deg, providers, iid)
            rec = {"image": iid, "tag": row.tag, "psnr": psnr(out, clean), "ssim": ssim(out, clean)}
        except RestoreError as exc:
            raise EvaluationError(f"image {iid}: {exc}") from exc
        per_tag[row.tag].append(rec)
    footer = []
    for t in tags or ():
        if t not in per_tag:
            footer.append(f"dataset {t!r} has no images and is omitted")
    rows, images = [], []
    for t in sorted(per_tag):
        recs = sorted(per_tag[t], key=lambda r: r["image"])
        images += recs
        rows.append(MetricRow(t, _mean([r["psnr"] for r in recs]), _mean([r["ssim"] for r in recs]), len(recs)))
    return MetricReport.from_rows(rows, footer, images)


# ------------------------------------------------------------------ ablations

ORDER_GRID: Tuple[Tuple[str, Tuple[str, str, str]], ...] = (
    ("a", ("where", "what", "how")),
    ("b", ("what", "how", "where")),
    ("Ours", ("how", "where", "what")),
)
ORDER_REFERENCE = {"a": (37.89, 0.982), "b": (38.04, 0.983), "Ours": (38.21, 0.986)}

COMPONENTS = ("IQA", "SGU", "TI", "ICRM")
COMPONENT_FIELDS = ("use_quality", "use_semantic", "use_task", "use_icrm")
COMPONENT_GRID: Tuple[Tuple[str, Tuple[bool, bool, bool, bool]], ...] = (
    ("a", (True, False, False, True)),
    ("b", (False, True, False, True)),
    ("c", (False, False, True, True)),
    ("d", (True, True, False, True)),
    ("e", (True, False, True, True)),
    ("f", (False, True, True, True)),
    ("g", (True, True, True, False)),
    ("Ours", (True, True, True, True)),
)
COMPONENT_REFERENCE = {
    "a": (37.57, 0.980), "b": (37.43, 0.978), "c": (37.52, 0.980), "d": (38.05, 0.985),
    "e": (37.93, 0.984), "f": (37.87, 0.984), "g": (38.03, 0.985), "Ours": (38.21, 0.986),
}


@dataclass(frozen=True)
class AblationRow:
    label: str
    setting: Tuple[str, ...]
    psnr: float = math.nan
    ssim: float = math.nan
    reference: Optional[Tuple[float, float]] = None
    error: Optional[str] = None


@dataclass(frozen=True)
class AblationReport:
    kind: str                      # "order" or "components"
    rows: Tuple[AblationRow, ...]
    iterations: int
    seed: int

    def row(self, label: str) -> AblationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_text(self) -> str:
        setting_cols = ["order"] if self.kind == "order" else list(COMPONENTS)
        header = [""] + setting_cols + ["PSNR", "SSIM", "ref PSNR", "ref SSIM"]
        body = []
        for r in self.rows:
            setting = [" -> ".join(s.capitalize() for s in r.setting)] if self.kind == "order" else list(r.setting)
            if r.error:
                metrics = ["failed", "", "", ""]
            else:
                metrics = [_fmt(r.psnr, 2), _fmt(r.ssim, 4), "", ""]
            if r.reference:
                metrics[2:] = [f"{r.reference[0]:.2f}", f"{r.reference[1]:.3f}"]
            body.append([r.label] + setting + metrics)
        w = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
        line = lambda x: "  ".join(c.ljust(w[i]) if i == 0 else c.rjust(w[i]) for i, c in enumerate(x)).rstrip()  # noqa: E731
        out = [f"{self.kind} ablation: {self.iterations} iterations, seed {self.seed}, training-set metrics",
               line(header), "-" * len(line(header))] + [line(x) for x in body]
        out.append("ref columns: full-scale published numbers, shown for orientation only; not comparable")
        out += [f"row {r.label} failed: {r.error}" for r in self.rows if r.error]
        return "\n".join(out) + "\n"

    def to_records(self) -> List[dict]:
        recs = []
        for r in self.rows:
            recs.append({"kind": f"ablation-{self.kind}", "label": r.label, "setting": list(r.setting),
                         "psnr": r.psnr, "ssim": r.ssim, "reference": list(r.reference) if r.reference else None,
                         "error": r.error, "iterations": self.iterations, "seed": self.seed})
        return recs

    def write(self, stem) -> Tuple[Path, Path]:
        return _write_pair(stem, self.to_text(), self.to_records())


def train_and_evaluate(cfg: ModelConfig, manifest, providers=None, seed: Optional[int] = None) -> MetricReport:
    """Train a fresh model for ``cfg.optimizer.total_iterations`` and evaluate it on ``manifest``."""
    if not isinstance(manifest, (list, tuple)):
        manifest = imio.read_manifest(manifest)
    cache = ImageCache()
    state = run_training(new_train_state(cfg, seed), manifest, providers, cache=cache)
    return evaluate(state.model, manifest, providers, cache=cache)


def _run_rows(kind, configs, manifest, providers, seed) -> List[AblationRow]:
    rows = []
    for label, setting, cfg, ref in configs:
        try:
            rep = train_and_evaluate(cfg, manifest, providers, seed)
            rows.append(AblationRow(label, setting, rep.averages[0], rep.averages[1], ref))
            log.info("%s ablation row %s: %.3f dB", kind, label, rep.averages[0])
        except RestoreError as exc:
            log.warning("%s ablation row %s failed: %s", kind, label, exc)
            rows.append(AblationRow(label, setting, reference=ref, error=str(exc)))
    return rows


def run_order_ablation(base_config: ModelConfig, manifest, orders: Optional[Sequence[Sequence[str]]] = None,
                       providers=None, seed: Optional[int] = None) -> AblationReport:
    """Train one model per perception order with identical seed and data."""
    orders = [tuple(o) for o in (orders if orders is not None else [o for _, o in ORDER_GRID])]
    if not orders:
        raise ValidationError("at least one order is required")
    known = {o: label for label, o in ORDER_GRID}
    seed = base_config.seed if seed is None else int(seed)
    configs, extra = [], 0
    for order in orders:
        order = tuple(s.lower() for s in order)
        if sorted(order) != sorted(PERCEPTION_FAMILY):
            raise ValidationError(f"order must permute how/where/what, got {order}")
        label = known.get(order)
        if label is None:
            extra += 1
            label = f"x{extra}"
        configs.append((label, order, base_config.replace(perception_order=order), ORDER_REFERENCE.get(label)))
    rows = _run_rows("order", configs, manifest, providers, seed)
    return AblationReport("order", tuple(rows), base_config.optimizer.total_iterations, seed)


def component_config(base: ModelConfig, flags: Sequence[bool]) -> ModelConfig:
    """``base`` with IQA / SGU / TI / ICRM switched per ``flags``; all-off raises a config error."""
    if len(flags) != 4:
        raise ValidationError(f"expected 4 component flags, got {len(flags)}")
    return base.replace(**{f: bool(v) for f, v in zip(COMPONENT_FIELDS, flags)})


def run_component_ablation(base_config: ModelConfig, manifest, providers=None, seed: Optional[int] = None,
                           grid: Sequence[Tuple[str, Sequence[bool]]] = COMPONENT_GRID) -> AblationReport:
    """Train the component grid; disabled guidance is replaced by learnable free parameters."""
    seed = base_config.seed if seed is None else int(seed)
    # build every config first so an invalid row fails before any training
    configs = [(label, tuple("on" if f else "off" for f in flags), component_config(base_config, flags),
                COMPONENT_REFERENCE.get(label)) for label, flags in grid]
    rows = _run_rows("components", configs, manifest, providers, seed)
    return AblationReport("components", tuple(rows), base_config.optimizer.total_iterations, seed)


def render_records(records: Sequence[dict]) -> str:
    """Re-render NDJSON records written by :meth:`MetricReport.write` or :meth:`AblationReport.write`."""
    if not records:
        raise EvaluationError("no records to render")
    kinds = {r.get("kind") for r in records}
    ablation = [k for k in kinds if k and k.startswith("ablation-")]
    if ablation:
        if len(ablation) > 1:
            raise EvaluationError(f"mixed ablation kinds: {sorted(ablation)}")
        kind = ablation[0].split("-", 1)[1]
        rows = tuple(AblationRow(r["label"], tuple(r["setting"]), r["psnr"], r["ssim"],
                                 tuple(r["reference"]) if r["reference"] else None, r["error"])
                     for r in records)
        return AblationReport(kind, rows, records[0]["iterations"], records[0]["seed"]).to_text()
    rows = [MetricRow(r["tag"], r["psnr"], r["ssim"], r["count"]) for r in records if r["kind"] == "row"]
    notes = [r["text"] for r in records if r["kind"] == "note"]
    images = [{k: v for k, v in r.items() if k != "kind"} for r in records if r["kind"] == "image"]
    if not rows:
        raise EvaluationError("records contain no metric rows")
    return MetricReport.from_rows(rows, notes, images).to_text()


def read_records(path: str | os.PathLike) -> List[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise EvaluationError(f"cannot read records from {path}: {exc}") from exc
