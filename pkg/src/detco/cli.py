"""Command-line entry point: pretrain, probe, ablate, attention, plot, synth-data."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, desk_config, dumps, parse_config
from .data import ToySpec, generate_toy, load_image_folder, write_image_folder

log = logging.getLogger("detco")


def _config(path: str | None) -> ExperimentConfig:
    # command-line runs start from the desk preset; files override it key by key
    return parse_config(path, base=desk_config()) if path else desk_config()


def _dataset(args, cfg: ExperimentConfig):
    if getattr(args, "data", None):
        return load_image_folder(args.data)
    d = cfg.data
    return generate_toy(ToySpec(d.num_classes, d.samples_per_class, d.image_side, d.seed))


def cmd_synth_data(args) -> int:
    cfg = _config(args.spec)
    d = cfg.data
    ds = generate_toy(ToySpec(d.num_classes, d.samples_per_class, d.image_side, d.seed))
    write_image_folder(ds, args.out)
    print(f"wrote {len(ds)} images in {ds.num_classes} classes to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import run

    cfg = _config(args.config)
    ds = _dataset(args, cfg)
    result = run(cfg, ds.images, args.out, resume=args.resume)
    print(f"run directory: {result.run_dir}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics_log}")
    return 0


def _stages(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid stage list {text!r}") from exc


def cmd_probe(args) -> int:
    from .evaluation import probe
    from .trainer import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    cfg = _config(args.config) if args.config else state.config
    eval_cfg = cfg.eval
    if args.stages:
        eval_cfg.stages = args.stages
    eval_cfg.validate()
    ds = load_image_folder(args.data)
    report = probe(state.query, ds.images, ds.labels, eval_cfg, side=state.config.augment.global_side)
    lines = ["stage  accuracy"] + [f"Res{s}  {100 * a:6.2f}" for s, a in report.accuracy.items()]
    lines.append(f"chance {100 * report.chance:6.2f}")
    table = "\n".join(lines) + "\n"
    print(table, end="")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out / "probe.txt").write_text(table)
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import ablation_grid, format_table, rows_to_json
    from .trainer import new_run_dir

    cfg = _config(args.config)
    ds = _dataset(args, cfg)
    out = new_run_dir(args.out)
    (out / "effective_config.toml").write_text(dumps(cfg))
    rows = ablation_grid(ds.images, ds.labels, cfg, out)
    table = format_table(rows)
    print(table, end="")
    (out / "ablation.json").write_text(json.dumps(rows_to_json(rows), indent=2) + "\n")
    (out / "ablation.txt").write_text(table)
    return 0


def cmd_attention(args) -> int:
    from PIL import Image

    from .augment import ingest, resize_bilinear
    from .model import to_tensor
    from .trainer import load_checkpoint
    from .viz import attention_map, overlay

    state = load_checkpoint(args.checkpoint)
    with Image.open(args.image) as im:
        img = ingest(np.asarray(im.convert("RGB")))
    side = args.side or state.config.augment.global_side
    state.query.eval()
    with torch.no_grad():
        feats = state.query.stage_features(to_tensor([resize_bilinear(img, side, side)]))
    amap = attention_map(feats.f5[0].numpy(), reduction=args.reduction)
    path = overlay(img, amap, args.out)
    np.save(Path(path).with_suffix(".npy"), amap.values)
    print(f"attention map {amap.values.shape[0]}x{amap.values.shape[1]} -> {path}")
    return 0


def cmd_plot(args) -> int:
    from .viz import plot_metrics

    written = plot_metrics(args.log, args.out)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detco", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("synth-data", help="write the synthetic toy dataset as an image folder")
    s.add_argument("--spec", help="config file; its data.* keys describe the dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("pretrain", help="run contrastive pretraining")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="image folder; defaults to the synthetic dataset")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("probe", help="linear probes on frozen stage features")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--stages", type=_stages, default=None)
    s.add_argument("--config", help="override the checkpoint's eval.* settings")
    s.add_argument("--out")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("ablate", help="MLS x GLC ablation grid")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out", default="ablations")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("attention", help="final-stage attention overlay for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--side", type=int, default=None)
    s.add_argument("--reduction", choices=("mean-abs", "max"), default="mean-abs")
    s.set_defaults(func=cmd_attention)

    s = sub.add_parser("plot", help="loss and learning-rate charts from a metrics log")
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
