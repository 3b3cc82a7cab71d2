"""Command-line entry point: ``semflow <command> ...``.

Failures print a single line ``error: <kind>: <message>`` on stderr and exit
with a nonzero status (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError
from .scene_synth import (DatasetError, SceneError, add_flow_noise, generate_scene, occlude_region, read_dataset,
                          read_poses, write_dataset)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _ints(text: str, what: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None


def _load_data(joined: str):
    paths = [p for p in joined.split(",") if p]
    if not paths:
        raise UsageError("--data needs at least one directory")
    return [read_dataset(p) for p in paths], paths


def _model_and_scene(ckpt: str, data: str | None):
    from .trainer import model_from_checkpoint
    model, cfg, extra = model_from_checkpoint(ckpt)
    source = data or extra.get("data", "").split(",")[0]
    if not source:
        raise UsageError("checkpoint has no recorded dataset; pass --data")
    scene = read_dataset(source)
    return model, cfg, scene


# --------------------------------------------------------------------------- commands

def cmd_synth(args):
    scene = generate_scene(args.recipe, args.seed)
    root = write_dataset(scene, args.out)
    print(f"wrote {scene.n_frames} frames ({scene.width}x{scene.height}, L={scene.num_classes}) to {root}")


def cmd_train(args):
    from .trainer import read_config, run_training
    cfg = read_config(args.config)
    if args.no_attention:
        cfg.use_attention = False
    scenes, paths = _load_data(args.data)
    every = max(1, args.log_every)

    def progress(row):
        if row["step"] % every == 0:
            print(f"step {row['step']} total {row['total']:.6f} wall {row['wall_ms'] / 1000:.1f}s",
                  file=sys.stderr, flush=True)

    result = run_training(scenes, cfg, out_dir=args.out, progress=progress,
                          data_paths=[str(Path(p).resolve()) for p in paths])
    print(f"checkpoint {result.checkpoint}")


def cmd_render(args):
    from .evalkit import render_views, scene_context
    model, _, scene = _model_and_scene(args.ckpt, args.data)
    poses = read_poses(args.poses)
    if args.times:
        times = _ints(args.times, "--times")
        if len(times) != len(poses):
            raise UsageError(f"--times has {len(times)} entries for {len(poses)} poses")
    else:
        times = [i % scene.n_frames for i in range(len(poses))]
    if any(not 0 <= t < scene.n_frames for t in times):
        raise UsageError(f"times must lie in [0, {scene.n_frames})")
    written = render_views(model, scene_context(model, scene), poses, times, args.out)
    print(f"wrote {len(written)} files to {args.out}")


def cmd_eval(args):
    from .evalkit import evaluate, write_report
    from .trainer import labeled_frames
    model, _, scene = _model_and_scene(args.ckpt, args.data)
    if args.split == "full":
        frames = list(range(scene.n_frames))
    else:
        seen = set(labeled_frames(args.split, scene.n_frames))
        frames = [t for t in range(scene.n_frames) if t not in seen]
    report = evaluate(model, scene, frames)
    write_report(report, args.report)
    print(json.dumps({k: round(v, 6) for k, v in report.summary.items()}))


def cmd_edit(args):
    from .evalkit import render_views, scene_context
    model, _, scene = _model_and_scene(args.ckpt, args.data)
    remove = _ints(args.remove, "--remove")
    bad = [c for c in remove if not 0 <= c < scene.num_classes]
    if bad:
        raise UsageError(f"class ids {bad} outside [0, {scene.num_classes})")
    frames = _ints(args.frames, "--frames") if args.frames else list(range(scene.n_frames))
    written = render_views(model, scene_context(model, scene), [scene.poses[t] for t in frames], frames,
                           args.out, remove_classes=tuple(remove))
    print(f"wrote {len(written)} files to {args.out}")


def cmd_gradcheck(args):
    from .checks import SUITES
    names = [args.module] if args.module else list(SUITES)
    if args.module and args.module not in SUITES:
        raise UsageError(f"unknown module {args.module!r}; choose from {sorted(SUITES)}")
    ok = True
    for name in names:
        for res in SUITES[name]():
            print(f"{res.name}: {res.report.summary().splitlines()[0]} ({res.seconds:.1f}s)")
            ok &= res.report.passed
    if not ok:
        raise GradientMismatch("one or more gradient checks failed")


class GradientMismatch(RuntimeError):
    pass


def cmd_perturb(args):
    scene = read_dataset(args.data)
    if args.flow_noise is not None:
        out = add_flow_noise(scene, args.flow_noise, seed=args.seed)
        default = f"{args.data.rstrip('/')}-noise{args.flow_noise:g}"
    else:
        vals = _ints(args.occlude, "--occlude")
        if len(vals) != 5:
            raise UsageError("--occlude takes frame,x,y,w,h")
        out = occlude_region(scene, vals[0], tuple(vals[1:]))
        default = f"{args.data.rstrip('/')}-occluded"
    root = write_dataset(out, args.out or default)
    print(f"wrote perturbed dataset to {root}")


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semflow", description="Semantic dynamic-scene fields on synthetic flow data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--recipe", default="balloon")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="two-phase training")
    s.add_argument("--data", required=True, help="dataset directory, or several joined by commas")
    s.add_argument("--config", required=True, help="key=value file of TrainConfig and loss-weight fields")
    s.add_argument("--out", required=True)
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--no-attention", action="store_true", help="ablation: flow rows skip self-attention")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("render", help="render RGB, labels and class probabilities at given poses")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--poses", required=True, help="one pose row per line, same layout as a dataset's poses.txt")
    s.add_argument("--out", required=True)
    s.add_argument("--times", help="comma-separated frame index per pose (default: line index mod N)")
    s.add_argument("--data", help="dataset used for image features (default: the one recorded with the checkpoint)")
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("eval", help="metrics at training views")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("full", "completion", "tracking"), default="full",
                   help="full: every frame; completion/tracking: frames without labels under that schedule")
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("edit", help="render training views with classes removed")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--remove", required=True, help="comma-separated class ids")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", help="comma-separated frames (default: all)")
    s.add_argument("--data")
    s.set_defaults(fn=cmd_edit)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("perturb", help="write a dataset copy with noisy flow or an occluder")
    s.add_argument("--data", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--flow-noise", type=float, metavar="BETA")
    g.add_argument("--occlude", metavar="FRAME,X,Y,W,H")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output directory (default: derived from --data)")
    s.set_defaults(fn=cmd_perturb)
    return p


def main(argv=None) -> int:
    torch.set_num_threads(1)
    from .trainer import ConfigError, NonFiniteLoss, TrainingDiverged
    try:
        args = build_parser().parse_args(argv)
        args.fn(args)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"error: diverged: {e}", file=sys.stderr)
        return 1
    except (ConfigError, SceneError, ValueError, IndexError) as e:
        kind = {ConfigError: "config", SceneError: "scene", CheckpointError: "checkpoint",
                NonFiniteLoss: "nonfinite"}.get(type(e), "value")
        print(f"error: {kind}: {e}".replace("\n", " "), file=sys.stderr)
        return 1
    except (DatasetError, OSError) as e:
        kind = "dataset" if isinstance(e, DatasetError) else "io"
        print(f"error: {kind}: {e}".replace("\n", " "), file=sys.stderr)
        return 1
    except GradientMismatch as e:
        print(f"error: gradcheck: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
