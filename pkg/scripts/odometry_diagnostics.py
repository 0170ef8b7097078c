"""Diagnose keyframe odometry quality on a scene with ground truth.

Runs stages 1-2 only (sequential windows, covisible pairs, pose graph)
and reports the error of every measured relative pose: rotation error in
degrees and translation length ratio against ground truth, plus keyframe
ATE before and after pose-graph optimization. Useful for separating
per-edge estimation noise from accumulated drift when tuning schedules.

Usage:
    python3 scripts/odometry_diagnostics.py <scene_dir> [--config FILE]
"""

import argparse
import math
import time

import numpy as np
import torch

from vidsfm.config import RunConfig, load_config
from vidsfm.evaluation import ate
from vidsfm.pipeline import associate_keyframes, pipeline_keyframes
from vidsfm.pose_graph import build_graph, optimize_pose_graph
from vidsfm.rasters import load_scene
from vidsfm.stages import (
    optimize_covisible_pairs,
    optimize_sequential_keyframes,
    prepare_engine_data,
    sequential_edges,
)


def rotation_error_deg(z, z_gt):
    d = (z @ z_gt.inverse()).r
    v = np.array([d[2, 1] - d[1, 2], d[0, 2] - d[2, 0], d[1, 0] - d[0, 1]])
    return math.degrees(math.asin(min(1.0, np.linalg.norm(v) / 2)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scene", help="scene directory (must carry ground truth)")
    ap.add_argument("--config", help="config file (key-value text)")
    ap.add_argument("--edges", action="store_true", help="print every edge")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else RunConfig()
    torch.set_num_threads(cfg.threads)
    scene = load_scene(args.scene)
    if scene.gt_poses is None:
        raise SystemExit(f"{args.scene} has no ground-truth poses")

    kf = list(pipeline_keyframes(scene, cfg).indices)
    cands, accepted = associate_keyframes(scene, kf, cfg)
    data = prepare_engine_data(scene, cfg)
    log = []
    t0 = time.time()
    states = optimize_sequential_keyframes(data, scene, kf, cfg, log)
    measured = sequential_edges(kf, cfg.tau_set, states)
    measured.update(optimize_covisible_pairs(data, scene, accepted, states, cfg, log))
    wall = time.time() - t0

    rows = []
    for (i, j), z in sorted(measured.items()):
        z_gt = scene.gt_poses[j] @ scene.gt_poses[i].inverse()
        gt_len = np.linalg.norm(z_gt.t)
        ratio = np.linalg.norm(z.t) / gt_len if gt_len > 0 else float("nan")
        rows.append((i, j, rotation_error_deg(z, z_gt), ratio))
        if args.edges:
            print(f"edge {i:4d} -> {j:4d}  rot_err {rows[-1][2]:7.3f} deg  "
                  f"len_ratio {ratio:6.3f}")

    gt_kf = [scene.gt_poses[f] for f in kf]
    pre = ate([states[f].pose for f in kf], gt_kf)
    graph = build_graph(kf, cfg.tau_set, accepted, [states[f].pose for f in kf],
                        measured)
    refined, cost = optimize_pose_graph(graph, cfg.pgo_max_iters)
    post = ate(refined, gt_kf)

    rot = np.array([r[2] for r in rows])
    ratio = np.array([r[3] for r in rows if np.isfinite(r[3])])
    print(f"keyframes {len(kf)}  edges {len(rows)}  "
          f"covisible accepted {len(accepted)}  wall {wall:.0f}s")
    print(f"rot_err_deg  mean {rot.mean():.3f}  max {rot.max():.3f}")
    print(f"len_ratio    mean {ratio.mean():.3f}  std {ratio.std():.3f}")
    print(f"keyframe ATE  pre-graph {pre:.4f}  post-graph {post:.4f}  "
          f"(final cost {cost:.3e})")


if __name__ == "__main__":
    main()
