"""Command-line entry point.

Subcommands: synthesize-data, train, generate, evaluate, ablate. Runs
are driven by a scale preset plus an optional ``key = value`` config
file plus ``--set key=value`` overrides; the resolved configuration is
echoed to ``effective_config.txt`` in the output directory. Exit codes:
0 success, 2 usage/config error, 3 data error, 4 numeric failure.

Setting ``CFTGAN_DETERMINISTIC=1`` pins torch to a single thread so
fixed-seed runs are bitwise reproducible.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from . import data as data_mod
from .captions import CaptionEncoder
from .errors import CftganError, ConfigError, NonFiniteLoss
from .evaluation import ABLATION_CONFIGS, export_samples, rmsd, run_ablation
from .serialization import write_flow
from .training import generate_sample, load_checkpoint, run_training


def _resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.preset(getattr(args, "scale", None) or "toy")
    if getattr(args, "config", None):
        cfg = config_mod.load_config(args.config, cfg)
    sets = getattr(args, "set", None) or []
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
    if sets:
        # apply all overrides in one parse so only the final state validates
        cfg = config_mod.parse_config_text("\n".join(sets), cfg)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg.validate()


def cmd_synthesize_data(args) -> int:
    cfg = _resolve_config(args)
    specs = data_mod.default_corpus_specs(cfg.canvas_size, cfg.canvas_frames,
                                          cfg.corpus_speed)
    count = data_mod.write_corpus(args.out, specs, seed=cfg.seed)
    config_mod.write_effective_config(cfg, args.out)
    print(f"wrote {count} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    print(f"training plan: model={args.model} K={cfg.total_iters} iterations, "
          f"batch={cfg.batch_size}, lr0={cfg.lr0}, "
          f"lr halves every {cfg.lr_halving_period} iterations")
    if args.plan_only:
        return 0
    dataset = data_mod.load_dataset(args.data)
    config_mod.write_effective_config(cfg, args.out)
    state, csv_path = run_training(dataset, cfg, args.out, model=args.model,
                                   resume=args.resume, iters=args.iters)
    print(f"trained to iteration {state.k}; losses in {csv_path}")
    return 0


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    state = load_checkpoint(args.checkpoint, cfg)
    artifacts = args.artifacts or str(Path(args.checkpoint).parent / "captions.cftc")
    encoder = CaptionEncoder.load(artifacts)
    phi = encoder.encode(args.caption).astype(np.float32)
    rng = torch.Generator().manual_seed(cfg.seed if args.seed is None else args.seed)
    video, flow = generate_sample(state, phi, cfg, rng)

    out = Path(args.out)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(data_mod.video_to_uint8(video)):
        Image.fromarray(frame, mode="RGB").save(frames_dir / f"{i:06d}.png")
    write_flow(out / "flow.cff", flow)
    export_samples([video], [args.caption], out)
    print(f"generated {video.shape[1]} frames into {out}")
    return 0


def _load_video_arg(path_str: str) -> np.ndarray:
    path = Path(path_str)
    frames_dir = path / "frames" if (path / "frames").is_dir() else path
    if frames_dir.is_dir():
        pngs = sorted(frames_dir.glob("*.png"))
        if pngs:
            frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in pngs])
            return data_mod.uint8_to_video(frames)
    raise CftganError(f"{path}: expected a clip directory or a directory of PNG frames")


def cmd_evaluate(args) -> int:
    value = rmsd(_load_video_arg(args.a), _load_video_arg(args.b))
    print(f"{value:.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    tags = [t.strip() for t in args.configs.split(",") if t.strip()]
    for tag in tags:
        if tag not in ABLATION_CONFIGS:
            raise ConfigError(f"unknown ablation configuration {tag!r}")
    dataset = data_mod.load_dataset(args.data)
    config_mod.write_effective_config(cfg, args.out)
    report = run_ablation(tags, dataset, cfg, args.out,
                          n_captions=args.captions, n_repeats=args.repeats,
                          budget=args.budget)
    for row in report.rows:
        print(f"config {row.tag}: rmsd {row.mean_rmsd:.3f} +- {row.std_rmsd:.3f}")
    print(f"report: {Path(args.out) / 'ablation_report.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cftgan",
        description="caption-conditioned two-stage video generation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scale", choices=("toy", "paper"), default=None,
                       help="base preset (default: toy)")
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key (repeatable)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synthesize-data", help="write the deterministic synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize_data)

    p = sub.add_parser("train", help="train the two-stage model or the baseline")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=("cftgan", "cvgan"), default="cftgan")
    p.add_argument("--resume", default=None, help="checkpoint file to continue from")
    p.add_argument("--iters", type=int, default=None,
                   help="train only this many iterations of the schedule")
    p.add_argument("--plan-only", action="store_true",
                   help="print the training plan and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate a video for a caption")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--artifacts", default=None,
                   help="caption artifacts file (default: next to the checkpoint)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="RMSD between two videos")
    common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the caption-encoding ablation grid")
    common(p)
    p.add_argument("--configs", default=",".join(ABLATION_CONFIGS))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=None,
                   help="training iterations per configuration")
    p.add_argument("--captions", type=int, default=None,
                   help="captions sampled per repeat")
    p.add_argument("--repeats", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    if os.environ.get("CFTGAN_DETERMINISTIC") == "1":
        torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except CftganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
