"""Command-line entry point: synth, train, render, eval, decompose."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numba
import numpy as np

from . import io
from .camera import CameraModel
from .config import ConfigError, build_config, describe_keys
from .data import load_manifest, split_train_test
from .errors import (
    CheckpointError, InvalidParameterError, LoadError, NonFiniteLossError, RenderDiagnosticsError,
)
from .evaluation import ClipModel, decompose, evaluate, json_number
from .gaussians import GaussianSet
from .synthetic import SyntheticSceneSpec, moving_sphere_spec, synthesize
from .trainer import chain_clips, initialize_scene, load_frames, render_frame

EXIT_USAGE = 2
EXIT_NONFINITE = 3

LOSS_COLUMNS = ("clip", "iteration", "phase", "loss", "rgb", "depth", "feat", "ssim",
                "tv", "reg_x", "reg_c", "psnr", "n_gaussians")


class UsageError(Exception):
    pass


def _set_threads(arg: int | None) -> None:
    raw = arg if arg is not None else os.environ.get("S3G_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"invalid thread count {raw!r}") from None
    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise UsageError(f"thread count must be in [1, {numba.config.NUMBA_NUM_THREADS}], got {n}")
    numba.set_num_threads(n)


def _write_json(path: Path, doc) -> None:
    io.atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def _load_models(paths: list[str]) -> tuple[list[ClipModel], list[dict]]:
    models, metas = [], []
    for p in paths:
        ck = io.load_checkpoint(p)
        t_range = tuple(ck.meta.get("time_range", (0.0, 1.0)))
        models.append(ClipModel(ck.scene, ck.hexfield, t_range))
        metas.append(ck.meta)
    return models, metas


# commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.spec == "moving-sphere":
        spec = moving_sphere_spec()
    else:
        spec = SyntheticSceneSpec.load(args.spec)
    ds = synthesize(spec, args.out, seed=args.seed)
    print(f"wrote {len(ds)} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.iters is not None:
        overrides.append(f"train.total_iters={args.iters}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    run_cfg = build_config(args.config, overrides)
    config = run_cfg.to_train_config()
    if not Path(args.data).exists():
        raise LoadError(f"data directory {args.data} does not exist")
    dataset = load_manifest(args.data)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", run_cfg.to_dict())
    log_path, csv_path = out / "train.jsonl", out / "loss.csv"
    state = {"clip": 0}
    with open(log_path, "w") as log_f, open(csv_path, "w", newline="") as csv_f:
        writer = csv.DictWriter(csv_f, fieldnames=LOSS_COLUMNS, extrasaction="ignore")
        writer.writeheader()

        def log(entry: dict) -> None:
            entry = {"clip": state["clip"], **entry}
            log_f.write(json.dumps(entry, sort_keys=True) + "\n")
            writer.writerow({k: entry.get(k, 0.0) for k in LOSS_COLUMNS})

        def save(k: int, res) -> None:
            meta = {"time_range": list(res.time_range), "frame_indices": res.frame_indices,
                    "clip": k, "iterations": config.total_iters // n_clips, "config": run_cfg.to_dict()}
            io.save_checkpoint(out / f"clip_{k:03d}.ckpt", res.scene, res.field, meta)
            state["clip"] = k + 1

        n_clips = -(-len(dataset) // config.clip_length_frames)
        results = chain_clips(dataset, config, skip_warmup=args.skip_warmup, log=log, on_clip=save)
    print(f"trained {len(results)} clip(s); checkpoints in {out}")
    return 0


def cmd_render(args) -> int:
    ck = io.load_checkpoint(args.checkpoint)
    try:
        doc = json.loads(Path(args.camera).read_text())
        if not isinstance(doc, dict):
            raise ValueError("expected a JSON object")
        camera = CameraModel.from_dict(doc)
    except (OSError, ValueError, InvalidParameterError) as exc:
        raise UsageError(f"malformed camera spec {args.camera}: {exc}") from exc
    t = args.time if args.time is not None else float(np.mean(ck.meta.get("time_range", (0.0, 0.0))))
    out = render_frame(ck.scene, ck.hexfield, camera, t)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    io.write_png(dest / "rgb.png", out.rgb)
    io.write_raw(dest / "depth.bin", out.depth)
    io.write_raw(dest / "alpha.bin", out.alpha)
    if ck.hexfield is not None:
        io.write_raw(dest / "semantic.bin", out.semantic)
    print(f"rendered t={t:g} to {dest}")
    return 0


def cmd_eval(args) -> int:
    models, metas = _load_models(args.checkpoints)
    dataset = load_manifest(args.data)
    every = args.every_nth
    if every is None:
        every = metas[0].get("config", {}).get("train.every_nth", 10)
    train, test = split_train_test(dataset, every)
    subset = test if args.split == "test" else train
    report = evaluate(models, load_frames(subset))
    report["split"] = args.split
    _write_json(Path(args.out), report)
    print(json.dumps(report["mean"], sort_keys=True))
    return 0


def cmd_decompose(args) -> int:
    ck = io.load_checkpoint(args.checkpoint)
    scores, dynamic = decompose(ck.scene, ck.hexfield, args.threshold, args.times)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    with open(dest / "scores.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["gaussian", "score", "dynamic"])
        for i, (s, d) in enumerate(zip(scores, dynamic)):
            w.writerow([i, repr(float(s)), int(d)])

    dataset = load_manifest(args.data)
    t_range = ck.meta.get("time_range", (0.0, 1.0))
    times = dataset.times
    pick = int(np.argmin(np.abs(times - float(np.mean(t_range)))))
    camera, t = dataset.frames[pick].camera, float(times[pick])
    for name, keep in (("dynamic", dynamic), ("static", ~dynamic)):
        part: GaussianSet = ck.scene.subset(np.nonzero(keep)[0])
        if part.n == 0:
            rgb = np.zeros((camera.height, camera.width, 3))
        else:
            field = ck.hexfield if name == "dynamic" else None
            rgb = render_frame(part, field, camera, t).rgb
        io.write_png(dest / f"{name}.png", rgb)
    summary = {"n_gaussians": int(scores.size), "n_dynamic": int(dynamic.sum()),
               "threshold": args.threshold, "frame": pick, "time": t,
               "mean_score": json_number(float(scores.mean())) if scores.size else 0.0}
    _write_json(dest / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynsplat", description="Dynamic-scene reconstruction with deformable Gaussians.",
        epilog=describe_keys(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $S3G_THREADS, else all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("spec", help="scene spec JSON, or 'moving-sphere' for the bundled scene")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset", epilog=describe_keys(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--skip-warmup", action="store_true")
    p.add_argument("--iters", type=int, help="shorthand for --set train.total_iters=N")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint from a camera")
    p.add_argument("checkpoint")
    p.add_argument("camera", help="camera JSON (intrinsics, size, world_to_camera)")
    p.add_argument("out")
    p.add_argument("--time", type=float, help="normalized time in [0, 1] (default: clip midpoint)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a split")
    p.add_argument("checkpoints", nargs="+", metavar="CKPT")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--every-nth", type=int, help="test split stride (default: from checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decompose", help="per-Gaussian dynamic scores and split renders")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--threshold", type=float, default=0.05, help="dynamic score cutoff, meters")
    p.add_argument("--times", type=int, default=16, help="time samples for the score")
    p.set_defaults(func=cmd_decompose)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except (NonFiniteLossError, RenderDiagnosticsError) as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (UsageError, ConfigError, InvalidParameterError, LoadError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
