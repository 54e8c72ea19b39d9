"""Command-line entry point: ``voxfuse <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from voxfuse.errors import VoxfuseError
from voxfuse.pipeline import (
    ExperimentConfig,
    build_scene_set,
    infer_sequence,
    run_ablation,
    run_adverse,
    run_fusion_comparison,
    train,
    train_model,
    write_rows_csv,
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-instvlm", action="store_true")
    p.add_argument("--no-weathfusion", action="store_true")
    p.add_argument("--no-daga", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train", "train one configuration and write report.json, metrics.csv, losses.csv"),
        ("ablate", "sweep all on/off combinations of the three modules"),
        ("fusion-bench", "compare addition, concat, conv3d and weather-gated fusion"),
        ("adverse", "per-condition scores with and without the weather gate"),
        ("infer-seq", "train, then run recursive prompting over a static frame sequence"),
    ]:
        _add_common(sub.add_parser(name, help=help_text))
    sub.choices["infer-seq"].add_argument("--frames", type=int, default=3)
    gc = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    gc.add_argument("--seeds", type=int, default=20)
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.no_instvlm:
        overrides["instvlm"] = False
    if args.no_weathfusion:
        overrides["weathfusion"] = False
    if args.no_daga:
        overrides["daga"] = False
    return replace(cfg, **overrides)


def _emit_table(rows: list[dict], cfg: ExperimentConfig, filename: str) -> None:
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        write_rows_csv(Path(cfg.out_dir) / filename, rows)
    for row in rows:
        print(json.dumps(row))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "grad-check":
            from voxfuse.gradsuite import run_suite

            worst = run_suite(seeds=args.seeds)
            for name, err in worst.items():
                print(f"{name:24s} max_rel_err={err:.3e}")
            return 0 if max(worst.values()) <= 1e-4 else 1
        cfg = config_from_args(args)
        if args.command == "train":
            rep = train(cfg)
            print(json.dumps({"iou": rep.iou, "miou": rep.miou,
                              "final_loss": rep.losses[-1]["total"],
                              "fusion_weights": rep.fusion_weights}))
        elif args.command == "ablate":
            _emit_table(run_ablation(cfg), cfg, "ablation.csv")
        elif args.command == "fusion-bench":
            _emit_table(run_fusion_comparison(cfg), cfg, "fusion.csv")
        elif args.command == "adverse":
            _emit_table(run_adverse(cfg), cfg, "adverse.csv")
        elif args.command == "infer-seq":
            model, _ = train_model(cfg)
            frame = build_scene_set(replace(cfg, eval_scenes_per_condition=1), "eval")[0]
            for t, pred in enumerate(infer_sequence([frame] * args.frames, cfg, model)):
                text = pred.prompt.text() if pred.prompt is not None else None
                print(json.dumps({"frame": t, "prompt": text, "predicted": pred.classes}))
    except VoxfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
