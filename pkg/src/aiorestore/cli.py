"""Command-line entry point: ``aiorestore <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .config import ModelConfig, desk_scale_preset, load_config, full_preset, save_config
from .degrade import generate_dataset, load_specs, parse_composite
from .evaluation import evaluate, read_records, render_records, run_component_ablation, run_order_ablation
from .exceptions import ConfigError, RestoreError
from .guidance.providers import FileProviders
from .io import list_images, read_manifest
from .training import load_checkpoint, train_loop

log = logging.getLogger("aiorestore")

PRESETS = {"desk": desk_scale_preset, "full": full_preset}


def _config(args) -> ModelConfig:
    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = PRESETS[args.preset]()
    else:
        raise ConfigError("no configuration given; pass --config FILE or --preset {desk,full}")
    if getattr(args, "iterations", None) is not None:
        cfg = cfg.with_optimizer(total_iterations=args.iterations)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _providers(args, cfg: ModelConfig) -> FileProviders:
    return FileProviders(args.quality_emb, args.masks, args.clip_emb, cfg.embed_dims.quality,
                         quality_text=cfg.quality_text, mask_mode=cfg.semantic_mode, mask_cells=cfg.semantic_cells)


def _add_config_args(p: argparse.ArgumentParser, iterations: bool = True) -> None:
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration used when --config is absent")
    if iterations:
        p.add_argument("--iterations", type=int, help="override the number of training iterations")
    p.add_argument("--seed", type=int, help="override the run seed")


def _add_provider_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--quality-emb", help="precomputed quality embedding file (default: built-in stub)")
    p.add_argument("--masks", help="precomputed semantic mask file (default: built-in stub)")
    p.add_argument("--clip-emb", help="precomputed content/degradation embedding file (default: built-in stub)")


def cmd_degrade(args) -> int:
    specs = load_specs(args.spec) if Path(args.spec).is_file() else [parse_composite(args.spec)]
    count = args.count if args.count is not None else len(list_images(args.input)) * len(specs)
    rows = generate_dataset(args.input, args.out, specs, count, seed=args.seed)
    print(f"wrote {len(rows)} pairs to {Path(args.out) / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = read_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.txt")
    final = train_loop(cfg, manifest, _providers(args, cfg), out, resume=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    report = evaluate(state.model, read_manifest(args.data), _providers(args, state.config), tags=args.tags)
    stem = Path(args.out) if args.out else Path(args.ckpt).with_name(Path(args.ckpt).stem + "_eval")
    txt, nd = report.write(stem)
    sys.stdout.write(report.to_text())
    print(f"report: {txt} and {nd}")
    return 0


def _parse_order(text: str):
    return tuple(s.strip().lower() for s in text.replace("-", ",").split(",") if s.strip())


def cmd_ablate_order(args) -> int:
    cfg = _config(args)
    orders = [_parse_order(o) for o in args.orders] if args.orders else None
    report = run_order_ablation(cfg, read_manifest(args.data), orders, _providers(args, cfg))
    report.write(Path(args.out))
    sys.stdout.write(report.to_text())
    return 0 if not any(r.error for r in report.rows) else 1


def cmd_ablate_components(args) -> int:
    cfg = _config(args)
    report = run_component_ablation(cfg, read_manifest(args.data), _providers(args, cfg))
    report.write(Path(args.out))
    sys.stdout.write(report.to_text())
    return 0 if not any(r.error for r in report.rows) else 1


def cmd_report(args) -> int:
    text = render_records(read_records(args.input))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aiorestore", description="Guided all-in-one image restoration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("degrade", help="synthesize degraded/clean pairs and a manifest")
    p.add_argument("--spec", required=True,
                   help="spec file (one composite per line) or inline spec, e.g. 'gaussian_noise sigma=25 | haze t=0.6'")
    p.add_argument("--in", dest="input", required=True, help="directory of clean images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, help="number of pairs (default: images x specs)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_provider_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="evaluation manifest")
    p.add_argument("--out", help="report path stem (writes .txt and .ndjson)")
    p.add_argument("--tags", nargs="*", help="dataset tags expected in the report")
    _add_provider_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-order", help="train one model per perception order")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report path stem")
    p.add_argument("--orders", nargs="+", help="orders such as how,where,what (default: the three-row grid)")
    _add_provider_args(p)
    p.set_defaults(func=cmd_ablate_order)

    p = sub.add_parser("ablate-components", help="train the eight-row component grid")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report path stem")
    _add_provider_args(p)
    p.set_defaults(func=cmd_ablate_components)

    p = sub.add_parser("report", help="render a .ndjson record file as a text table")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", help="write the table here as well")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        print("aiorestore: error: a command is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except RestoreError as exc:
        print(f"aiorestore: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"aiorestore: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
