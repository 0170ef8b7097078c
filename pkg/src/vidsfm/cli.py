"""Command-line entry point: synth / run / eval / export.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
Thread count resolves flag > GCVD_THREADS > config file > default (1).
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np
import torch

from .config import RunConfig, config_from_kv, load_config
from .errors import ConfigError, DataError, NumericalError
from .evaluation import ate, depth_metrics, metrics_csv, metrics_kv_text, rpe
from .pipeline import run_pipeline, write_outputs, write_pointcloud
from .rasters import (
    ScenePaths,
    directory_digest,
    load_scene,
    read_raster,
    read_trajectory,
    validate_scene,
)
from .synth import generate, load_spec


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _parse_frames(text: str) -> list:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError as e:
        raise ConfigError(f"bad frame list {text!r}: {e}") from e


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.skip_pgo:
        overrides["skip_pgo"] = "1"
    if args.no_grad_loss:
        overrides["lambda_grad"] = "0"
    if args.no_mesh:
        overrides["use_mesh"] = "0"
    if args.uniform_keyframes:
        overrides["uniform_keyframes"] = "1"
    threads = args.threads
    if threads is None:
        env = os.environ.get("GCVD_THREADS")
        if env is not None:
            try:
                threads = int(env)
            except ValueError as e:
                raise ConfigError(f"GCVD_THREADS={env!r} is not an integer") from e
    if threads is not None:
        overrides["threads"] = str(threads)
    return config_from_kv(overrides, cfg)


def cmd_synth(args) -> int:
    spec = load_spec(args.spec)
    out = ScenePaths(args.out).root
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} exists and is not empty (use --force)")
    generate(spec, out)
    print(f"scene {out}")
    print(f"digest {directory_digest(out)}")
    return 0


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    torch.set_num_threads(cfg.threads)
    scene = load_scene(args.scene)
    pc_frames = _parse_frames(args.pointcloud_frames) if args.pointcloud_frames else ()
    result = run_pipeline(scene, cfg, progress=_progress)
    write_outputs(result, scene, args.out, cfg, pointcloud_frames=pc_frames)
    print(f"run {args.out}")
    print(f"keyframes {result.report['n_keyframes']}")
    return 0


def _load_run_outputs(est_dir, n: int):
    sp = ScenePaths(est_dir)
    traj_path = sp.root / "trajectory.txt"
    if not traj_path.exists():
        raise DataError(f"no trajectory.txt in {est_dir}")
    poses_c2w, _ = read_trajectory(traj_path)
    depths = []
    for t in range(n):
        path = sp.root / "depth" / f"depth_{t:06d}.gcvdr"
        if not path.exists():
            raise DataError(f"missing estimated depth {path}")
        depths.append(np.asarray(read_raster(path), dtype=np.float64))
    return [p.inverse() for p in poses_c2w], depths


def cmd_eval(args) -> int:
    scene = load_scene(args.gt_scene)
    if scene.gt_poses is None or scene.gt_depths is None:
        raise DataError(f"{args.gt_scene} has no ground truth")
    est_poses, est_depths = _load_run_outputs(args.est, scene.n_frames)
    if len(est_poses) != scene.n_frames:
        raise DataError(
            f"estimated trajectory has {len(est_poses)} poses "
            f"for {scene.n_frames} frames"
        )
    dm = depth_metrics(est_depths, scene.gt_depths, scene.masks)
    t_rmse, r_deg = rpe(est_poses, scene.gt_poses, step=args.rpe_step)
    metrics = {
        "ate": ate(est_poses, scene.gt_poses),
        "rpe_trans": t_rmse,
        "rpe_rot_deg": r_deg,
        **dm.as_dict(),
    }
    if any(math.isnan(v) for v in metrics.values()):
        raise NumericalError(f"NaN metric in {metrics}")
    sys.stdout.write(metrics_kv_text(metrics))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(metrics_csv(metrics))
    return 0


def cmd_export(args) -> int:
    scene = load_scene(args.scene, with_gt=False)
    frames = _parse_frames(args.frames)
    bad = [t for t in frames if not 0 <= t < scene.n_frames]
    if bad:
        raise DataError(f"frames {bad} outside video of {scene.n_frames} frames")
    poses, depths = _load_run_outputs(args.run, scene.n_frames)
    write_pointcloud(args.out, frames, depths, poses, scene.intrinsics, scene.masks)
    print(f"pointcloud {args.out}")
    return 0


def cmd_validate(args) -> int:
    problems = validate_scene(args.scene)
    for p in problems:
        print(p)
    if problems:
        raise DataError(f"{len(problems)} format problem(s) in {args.scene}")
    print(f"ok {args.scene}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vidsfm", description="Offline structure-from-motion for monocular video"
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene directory")
    p.add_argument("spec", help="scene spec file (key-value text)")
    p.add_argument("out", help="output scene directory")
    p.add_argument("--force", action="store_true", help="overwrite existing output")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run the full pipeline on a scene")
    p.add_argument("scene", help="scene directory")
    p.add_argument("out", help="output directory")
    p.add_argument("--config", help="config file (key-value text)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: GCVD_THREADS or 1)")
    p.add_argument("--skip-pgo", action="store_true",
                   help="ablation: skip pose-graph optimization")
    p.add_argument("--no-grad-loss", action="store_true",
                   help="ablation: disable the depth-gradient loss term")
    p.add_argument("--no-mesh", action="store_true",
                   help="ablation: freeze the deformation mesh at zero")
    p.add_argument("--uniform-keyframes", action="store_true",
                   help="ablation: equally spaced keyframes of the same count")
    p.add_argument("--pointcloud-frames", metavar="LIST",
                   help="comma-separated frames to export as XYZ points")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="compare a run against scene ground truth")
    p.add_argument("est", help="run output directory")
    p.add_argument("gt_scene", help="scene directory with ground truth")
    p.add_argument("--rpe-step", type=int, default=1)
    p.add_argument("--csv", help="also write metrics as CSV to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write an XYZ point cloud from a run")
    p.add_argument("scene", help="scene directory")
    p.add_argument("run", help="run output directory")
    p.add_argument("out", help="output .xyz path")
    p.add_argument("--frames", required=True, metavar="LIST",
                   help="comma-separated frame indices")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("validate", help="check a scene directory format")
    p.add_argument("scene", help="scene directory")
    p.set_defaults(func=cmd_validate)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
