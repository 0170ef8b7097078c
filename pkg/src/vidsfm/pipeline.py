"""End-to-end driver: wire the stages together and write the artifacts.

Order: keyframe selection -> association -> sequential keyframe optimization
-> co-visible pair optimization -> pose-graph optimization -> non-keyframe
optimization -> temporal depth filter -> exports.

Every stage is timed and its errors are re-raised with a stage tag. The run
report separates deterministic numbers from wall times so two runs with the
same scene, config, and thread count agree on everything above the timings
marker.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig, config_to_text
from .errors import ConfigError, DataError, NumericalError
from .geometry import Intrinsics, pixel_grid
from .keyframing import (
    ExactFlowProvider,
    FileFlowProvider,
    KeyframeSet,
    associate_candidates,
    descriptor,
    mean_static_flow_magnitude,
    select_keyframes,
    similarity_matrix,
    verify_pair,
)
from .pose_graph import build_graph, edge_residual, optimize_pose_graph
from .post_filter import filter_video
from .rasters import Scene, ScenePaths, format_kv_text, write_raster, write_trajectory
from .stages import (
    EngineData,
    optimize_covisible_pairs,
    optimize_nonkeyframes,
    optimize_sequential_keyframes,
    prepare_engine_data,
    sequential_edges,
)
from .state import depth_from_params, save_frame_state

TIMINGS_MARKER = "# timings (excluded from determinism)"


@dataclass
class RunResult:
    """Everything a run produces, before any file is written."""

    keyframes: KeyframeSet
    states: dict  # frame id -> FrameState, all frames
    depths: list  # (H, W) float64 filtered depths
    report: dict  # deterministic numbers only
    timings: list  # (stage name, seconds)
    loss_log: list  # text lines from the optimizers

    @property
    def poses(self) -> list:
        return [self.states[t].pose for t in range(len(self.depths))]


@contextmanager
def _stage(name: str, timings: list, progress=None):
    if progress:
        progress(f"[{name}] start")
    t0 = time.perf_counter()
    try:
        yield
    except (ConfigError, DataError, NumericalError) as e:
        raise type(e)(f"[{name}] {e}") from e
    finally:
        dt = time.perf_counter() - t0
        timings.append((name, dt))
        if progress:
            progress(f"[{name}] done in {dt:.2f}s")


def pipeline_keyframes(scene: Scene, cfg: RunConfig) -> KeyframeSet:
    """Flow-accumulation selection; uniform stride of equal count in ablation."""
    long_side = scene.intrinsics.long_side
    mags = [
        mean_static_flow_magnitude(scene.flow_fwd[t], scene.masks[t], long_side)
        for t in range(scene.n_frames - 1)
    ]
    ks = select_keyframes(mags, cfg.keyframe_delta)
    if cfg.uniform_keyframes:
        uniform = sorted(
            set(int(round(x)) for x in np.linspace(0, scene.n_frames - 1, len(ks)))
        )
        ks = KeyframeSet(
            indices=uniform, step_magnitudes=ks.step_magnitudes, trace=ks.trace
        )
    return ks


def _keyframe_descriptors(scene: Scene, keyframes) -> np.ndarray:
    if scene.descriptors is not None:
        return np.stack([scene.descriptors[f] for f in keyframes])
    return np.stack([descriptor(scene.images[f]) for f in keyframes])


def associate_keyframes(scene: Scene, keyframes, cfg: RunConfig):
    """Similarity candidates, then geometric verification per pair.

    Pair flows come from precomputed pairflow/ rasters when present, else
    from ground truth when the scene carries it; a pair with no flow source
    stays unverified and is dropped.

    Returns (candidate frame pairs, accepted frame pairs).
    """
    kf = list(keyframes)
    sim = similarity_matrix(_keyframe_descriptors(scene, kf))
    cand_pos = associate_candidates(sim, cfg.assoc_delta, cfg.alpha)
    candidates = [(kf[i], kf[j]) for i, j in cand_pos]

    file_provider = FileFlowProvider(scene.paths)
    exact = None
    if scene.gt_depths is not None and scene.gt_poses is not None:
        exact = ExactFlowProvider(scene.gt_depths, scene.gt_poses, scene.intrinsics)

    long_side = scene.intrinsics.long_side
    accepted = []
    for fi, fj in candidates:
        if file_provider.has(fi, fj) and file_provider.has(fj, fi):
            provider = file_provider
        elif exact is not None:
            provider = exact
        else:
            continue
        res = verify_pair(
            provider.get(fi, fj),
            provider.get(fj, fi),
            scene.masks[fi],
            cfg.keyframe_delta,
            long_side,
            rho=cfg.fb_inlier_ratio,
            eps_fb=cfg.fb_eps(long_side),
        )
        if res.accepted:
            accepted.append((fi, fj))
    return candidates, accepted


def _graph_cost(graph) -> float:
    return float(
        sum(
            e.weight @ (edge_residual(e, graph.initial_poses[e.i],
                                      graph.initial_poses[e.j]) ** 2)
            for e in graph.edges
        )
    )


def final_depths(data: EngineData, states: dict) -> list:
    """Full-resolution depth of every frame from its optimized parameters."""
    n = data.full.n_frames
    out = []
    with torch.no_grad():
        for t in range(n):
            d = depth_from_params(
                torch.tensor([states[t].a], dtype=torch.float64),
                torch.tensor([states[t].b], dtype=torch.float64),
                data.full.nrm[t : t + 1],
                torch.tensor(states[t].mesh[None], dtype=torch.float64),
                data.up_full,
            )
            out.append(d[0].numpy())
    return out


def run_pipeline(scene: Scene, cfg: RunConfig, progress=None) -> RunResult:
    """Execute every stage on a loaded scene; no files are touched."""
    cfg.validate()
    torch.manual_seed(cfg.seed)
    timings: list = []
    loss_log: list = []
    report: dict = {
        "n_frames": scene.n_frames,
        "width": scene.meta.width,
        "height": scene.meta.height,
    }

    with _stage("keyframes", timings, progress):
        ks = pipeline_keyframes(scene, cfg)
        kf = list(ks.indices)
        report["n_keyframes"] = len(kf)
        report["keyframes"] = ",".join(str(f) for f in kf)

    with _stage("association", timings, progress):
        candidates, accepted = associate_keyframes(scene, kf, cfg)
        report["n_covisible_candidates"] = len(candidates)
        report["n_covisible_accepted"] = len(accepted)

    with _stage("prepare", timings, progress):
        data = prepare_engine_data(scene, cfg)

    with _stage("sequential", timings, progress):
        states = optimize_sequential_keyframes(data, scene, kf, cfg, loss_log)
        measured = sequential_edges(kf, cfg.tau_set, states)
        report["n_sequential_edges"] = len(measured)

    with _stage("covisible", timings, progress):
        measured.update(
            optimize_covisible_pairs(data, scene, accepted, states, cfg, loss_log)
        )

    with _stage("pose_graph", timings, progress):
        graph = build_graph(
            kf, cfg.tau_set, accepted, [states[f].pose for f in kf], measured
        )
        report["n_graph_edges"] = len(graph.edges)
        report["pgo_initial_cost"] = _graph_cost(graph)
        if cfg.skip_pgo:
            report["pgo_final_cost"] = report["pgo_initial_cost"]
            report["pgo_skipped"] = 1
        else:
            refined, cost = optimize_pose_graph(graph, cfg.pgo_max_iters)
            for f, p in zip(kf, refined):
                states[f].pose = p
            report["pgo_final_cost"] = cost
            report["pgo_skipped"] = 0

    with _stage("nonkeyframes", timings, progress):
        states = optimize_nonkeyframes(data, scene, states, kf, cfg, loss_log)

    with _stage("filter", timings, progress):
        raw = final_depths(data, states)
        poses = [states[t].pose for t in range(scene.n_frames)]
        depths = filter_video(
            raw, poses, scene.intrinsics, scene.flow_fwd, scene.flow_bwd, cfg
        )

    return RunResult(
        keyframes=ks,
        states=states,
        depths=depths,
        report=report,
        timings=timings,
        loss_log=loss_log,
    )


def unproject_frame(depth: np.ndarray, pose, k: Intrinsics, mask) -> np.ndarray:
    """World-space XYZ of every masked pixel, one row per point."""
    h, w = depth.shape
    grid = pixel_grid(h, w)
    x = (grid[..., 0] - k.cx) / k.fx * depth
    y = (grid[..., 1] - k.cy) / k.fy * depth
    cam = np.stack([x, y, depth], axis=-1)[np.asarray(mask, dtype=bool)]
    return (cam - pose.t) @ pose.r  # rows (X - t)^T R = (R^T (X - t))^T


def write_pointcloud(path, frames, depths, poses, k: Intrinsics, masks) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in frames:
            pts = unproject_frame(depths[t], poses[t], k, masks[t])
            for p in pts:
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def report_text(report: dict, timings: list) -> str:
    """Deterministic key-values, then wall times behind the marker."""
    lines = [format_kv_text(report.items()).rstrip("\n"), TIMINGS_MARKER]
    total = 0.0
    for name, dt in timings:
        lines.append(f"twall_{name} {dt:.3f}")
        total += dt
    lines.append(f"twall_total {total:.3f}")
    return "\n".join(lines) + "\n"


def write_outputs(result: RunResult, scene: Scene, out_dir, cfg: RunConfig,
                  pointcloud_frames=()) -> None:
    """Trajectory, filtered depths, states, report, loss log, resolved config."""
    sp = ScenePaths(out_dir)
    sp.root.mkdir(parents=True, exist_ok=True)
    n = scene.n_frames
    poses = result.poses

    write_trajectory(
        [p.inverse() for p in poses], [float(t) for t in range(n)],
        sp.root / "trajectory.txt",
    )

    depth_dir = sp.root / "depth"
    depth_dir.mkdir(exist_ok=True)
    for t in range(n):
        write_raster(
            result.depths[t].astype(np.float32),
            depth_dir / f"depth_{t:06d}.gcvdr",
        )

    states_dir = sp.root / "states"
    states_dir.mkdir(exist_ok=True)
    for t in range(n):
        save_frame_state(states_dir, t, result.states[t])

    (sp.root / "report.txt").write_text(report_text(result.report, result.timings))
    (sp.root / "loss_log.txt").write_text("\n".join(result.loss_log) + "\n")
    (sp.root / "config.txt").write_text(config_to_text(cfg))

    if pointcloud_frames:
        bad = [t for t in pointcloud_frames if not 0 <= t < n]
        if bad:
            raise DataError(f"point-cloud frames {bad} outside video of {n} frames")
        write_pointcloud(
            sp.root / "pointcloud.xyz", pointcloud_frames, result.depths,
            poses, scene.intrinsics, scene.masks,
        )
