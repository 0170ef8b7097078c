"""Three-stage windowed refinement of per-frame depth and pose parameters.

Stage one optimizes keyframes in overlapping windows at quarter scale,
stage two measures co-visible keyframe pairs pose-only, stage three
finishes every frame at full resolution with keyframe poses held fixed.
Windows of batch_size frames overlap by max(tau_set) so each frame is
trainable in exactly one window while previously finalized frames stay in
the loss as frozen context.

Step sizes are preconditioned per parameter group: twist translations are
expressed in units of the scene's prior depth scale and the correction
mesh carries a fixed gain, which lets a single learning rate move poses,
exposure-like log offsets, and mesh vertices by commensurate amounts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .adam import Adam
from .config import RunConfig
from .diffgeom import MeshUpsampler, mesh_grid_shape
from .errors import DataError
from .geometry import Intrinsics, Pose
from .imageops import area_resize
from .losses import LossWeights, PairBatch, total_loss
from .post_filter import chain_flow, fb_inconsistency
from .rasters import normalize_log_prior
from .state import FrameBundle, FrameState, WindowState, interpolate_pose

_LOG_EVERY = 10
_QUARTER = 4
# area-mean of a {0,1} mask equals 1 only when every covered pixel is set
_STRICT = 1.0 - 1e-9


def window_spans(n: int, batch: int, overlap: int):
    """[start, end) spans covering 0..n-1, consecutive spans sharing overlap."""
    if batch <= overlap:
        raise DataError(f"window batch {batch} must exceed overlap {overlap}")
    if n < 1:
        raise DataError("cannot partition an empty sequence")
    spans = []
    start = 0
    while True:
        end = min(start + batch, n)
        spans.append((start, end))
        if end >= n:
            return spans
        start = end - overlap


def scaled_intrinsics(k: Intrinsics, h_new: int, w_new: int) -> Intrinsics:
    """Intrinsics after area resampling to h_new x w_new.

    Continuous image coordinates (pixel center + 0.5) scale linearly, which
    reduces to Intrinsics.scaled for integer factors.
    """
    sx = w_new / k.width
    sy = h_new / k.height
    return Intrinsics(
        fx=k.fx * sx,
        fy=k.fy * sy,
        cx=(k.cx + 0.5) * sx - 0.5,
        cy=(k.cy + 0.5) * sy - 0.5,
        width=w_new,
        height=h_new,
    )


def _resize_mask(mask: np.ndarray, h2: int, w2: int) -> np.ndarray:
    return area_resize(mask.astype(np.float64), h2, w2) >= _STRICT


def _resize_flow(flow: np.ndarray, h2: int, w2: int) -> np.ndarray:
    h, w = flow.shape[:2]
    out = area_resize(flow, h2, w2)
    out[..., 0] *= w2 / w
    out[..., 1] *= h2 / h
    return out


@dataclass
class EngineData:
    """Per-scale tensors plus the quantities shared across stages."""

    full: FrameBundle
    quarter: FrameBundle
    mu: np.ndarray  # (n,) static-pixel mean of each log prior
    sigma: np.ndarray  # (n,) static-pixel spread of each log prior
    gh: int
    gw: int
    up_full: MeshUpsampler
    up_quarter: MeshUpsampler
    pose_scale: float

    def bundle(self, full_res: bool):
        return self.full if full_res else self.quarter

    def upsampler(self, full_res: bool):
        return self.up_full if full_res else self.up_quarter


def prepare_engine_data(scene, cfg: RunConfig) -> EngineData:
    """Normalize priors once at full resolution and build both loss scales."""
    n = len(scene.images)
    h, w = scene.images[0].shape
    gh, gw = mesh_grid_shape(h, w, cfg.mesh_long_side)
    h4, w4 = max(2, round(h / _QUARTER)), max(2, round(w / _QUARTER))

    mu = np.zeros(n)
    sigma = np.zeros(n)
    nrm_full = np.zeros((n, h, w))
    nrm_quarter = np.zeros((n, h4, w4))
    prior_quarter = np.zeros((n, h4, w4))
    static_vertex = np.zeros((n, gh, gw), dtype=bool)
    masks_quarter = np.zeros((n, h4, w4), dtype=bool)
    images_quarter = np.zeros((n, h4, w4))
    for t in range(n):
        np_t = normalize_log_prior(scene.prior_depths[t], scene.masks[t])
        mu[t], sigma[t] = np_t.mu, np_t.sigma
        nrm_full[t] = np_t.n
        # the reduced-scale prior lives in the same (mu, sigma) frame, so
        # depth params keep one meaning across scales
        nrm_quarter[t] = area_resize(np_t.n, h4, w4)
        prior_quarter[t] = np.exp(mu[t] + sigma[t] * nrm_quarter[t])
        static_vertex[t] = area_resize(
            scene.masks[t].astype(np.float64), gh, gw
        ) >= 0.5
        masks_quarter[t] = _resize_mask(scene.masks[t], h4, w4)
        images_quarter[t] = area_resize(scene.images[t], h4, w4)

    def t64(x):
        return torch.tensor(np.asarray(x), dtype=torch.float64)

    sv = torch.as_tensor(static_vertex)
    full = FrameBundle(
        images=t64(np.stack(scene.images)),
        masks=torch.as_tensor(np.stack(scene.masks)),
        prior_depths=t64(np.stack(scene.prior_depths)),
        nrm=t64(nrm_full),
        static_vertex=sv,
        k=scene.intrinsics,
    )
    quarter = FrameBundle(
        images=t64(images_quarter),
        masks=torch.as_tensor(masks_quarter),
        prior_depths=t64(prior_quarter),
        nrm=t64(nrm_quarter),
        static_vertex=sv,
        k=scaled_intrinsics(scene.intrinsics, h4, w4),
    )
    return EngineData(
        full=full,
        quarter=quarter,
        mu=mu,
        sigma=sigma,
        gh=gh,
        gw=gw,
        up_full=MeshUpsampler(gh, gw, h, w),
        up_quarter=MeshUpsampler(gh, gw, h4, w4),
        pose_scale=float(np.exp(np.median(mu))),
    )


def initial_state(data: EngineData, t: int) -> FrameState:
    """Identity pose and the exact prior: a = mu, b = sigma, flat mesh."""
    return FrameState(
        a=float(data.mu[t]),
        b=float(data.sigma[t]),
        mesh=np.zeros((data.gh, data.gw)),
        pose=Pose.identity(),
    )


def _window_pairs(n_frames: int, tau_set):
    """(p, q, weight, adjacent) for every in-window pair q = p + tau."""
    out = []
    for p in range(n_frames):
        for tau in sorted(tau_set):
            q = p + tau
            if q < n_frames:
                out.append((p, q, 1.0 / tau, tau == 1))
    return out


def _pair_flow_rows(scene, i: int, j: int, eps: float):
    """Full-res prior flow and fb-consistency mask for both directions.

    Adjacent video frames resolve to the stored flows; wider gaps (between
    consecutive keyframes) are chained through the intermediate frames.
    """
    f_ij, v_ij = chain_flow(scene.flow_fwd, scene.flow_bwd, i, j)
    f_ji, v_ji = chain_flow(scene.flow_fwd, scene.flow_bwd, j, i)
    d_ij = fb_inconsistency(f_ij, v_ij, f_ji, v_ji)
    d_ji = fb_inconsistency(f_ji, v_ji, f_ij, v_ij)
    return (f_ij, d_ij <= eps), (f_ji, d_ji <= eps)


def _build_batch(scene, ids, pairs, h: int, w: int, eps: float,
                 full_res: bool) -> PairBatch:
    """Stack directed rows for the window frames listed in ids."""
    h_full, w_full = scene.images[0].shape
    ref, src, weight, adjacent, flows, fbs = [], [], [], [], [], []
    zero_flow = np.zeros((h, w, 2))
    no_fb = np.zeros((h, w), dtype=bool)
    for p, q, wt, adj in pairs:
        rows = [(p, q), (q, p)]
        if adj:
            fwd, bwd = _pair_flow_rows(scene, ids[p], ids[q], eps)
            per_row = [fwd, bwd]
        else:
            per_row = [(None, None), (None, None)]
        for (a, b), (fl, fb) in zip(rows, per_row):
            ref.append(a)
            src.append(b)
            weight.append(wt)
            adjacent.append(adj)
            if fl is None:
                flows.append(zero_flow)
                fbs.append(no_fb)
            elif full_res:
                flows.append(fl)
                fbs.append(fb)
            else:
                flows.append(_resize_flow(fl, h, w))
                fbs.append(_resize_mask(fb, h, w))
    return PairBatch(
        ref=torch.tensor(ref, dtype=torch.long),
        src=torch.tensor(src, dtype=torch.long),
        weight=torch.tensor(weight, dtype=torch.float64),
        adjacent=torch.tensor(adjacent, dtype=torch.bool),
        flow_prior=torch.tensor(np.stack(flows), dtype=torch.float64),
        fb_valid=torch.as_tensor(np.stack(fbs)),
    )


def _window_tensors(bundle: FrameBundle, ids):
    sel = torch.tensor(ids, dtype=torch.long)
    return (
        bundle.images.index_select(0, sel),
        bundle.masks.index_select(0, sel),
        bundle.prior_depths.index_select(0, sel),
        bundle.static_vertex.index_select(0, sel),
    )


def _run_adam(ws: WindowState, frame_tensors, batch: PairBatch, k: Intrinsics,
              weights: LossWeights, iters: int, lr: float, log: list, tag: str):
    images, masks, priors, static_vertex = frame_tensors
    opt = Adam(ws.params, lr)
    for it in range(iters):
        opt.zero_grad()
        total, breakdown, _ = total_loss(
            images, masks, priors, static_vertex, ws.depths(), ws.poses(),
            ws.effective_meshes(), batch, k, weights,
        )
        total.backward()
        ws.mask_frozen_grads()
        opt.step()
        if it % _LOG_EVERY == 0 or it == iters - 1:
            terms = " ".join(
                f"{name}={float(v.detach()):.9e}" for name, v in breakdown.items()
            )
            log.append(f"{tag} iter={it} total={float(total.detach()):.9e} {terms}")


def _optimize_window(data: EngineData, scene, cfg: RunConfig, ids, states,
                     pose_free, depth_free, iters: int, lr: float,
                     full_res: bool, log: list, tag: str):
    """One window: build tensors, run Adam, write results back into states."""
    bundle = data.bundle(full_res)
    h, w = bundle.images.shape[1], bundle.images.shape[2]
    pairs = _window_pairs(len(ids), cfg.tau_set)
    if not pairs:
        warnings.warn(f"{tag}: window of {len(ids)} frames has no pairs; "
                      "poses left at initialization")
        return
    eps = cfg.fb_eps(scene.intrinsics.long_side)
    batch = _build_batch(scene, ids, pairs, h, w, eps, full_res)
    ws = WindowState(
        ids, [states[i] for i in ids],
        bundle.nrm.index_select(0, torch.tensor(ids, dtype=torch.long)),
        data.upsampler(full_res), pose_free, depth_free,
        pose_scale=data.pose_scale, mesh_gain=cfg.mesh_step_gain,
        mesh_free=bool(cfg.use_mesh),
    )
    _run_adam(ws, _window_tensors(bundle, ids), batch, bundle.k,
              LossWeights.from_config(cfg), iters, lr, log, tag)
    for i, st in zip(ids, ws.export()):
        states[i] = st


def optimize_sequential_keyframes(data: EngineData, scene, keyframes,
                                  cfg: RunConfig, log: list) -> dict:
    """Stage one: windowed keyframe refinement at quarter scale.

    Returns {frame_id: FrameState}. New frames enter at the previous
    frame's pose (an identity chain in the first window) with depth params
    reproducing their prior; frames finalized by earlier windows are frozen.
    """
    kf = list(getattr(keyframes, "indices", keyframes))
    states = {}
    overlap = max(cfg.tau_set)
    spans = window_spans(len(kf), cfg.batch_size, overlap)
    finalized = 0
    for w_idx, (s, e) in enumerate(spans):
        ids = kf[s:e]
        for pos in range(s, e):
            vid = kf[pos]
            if vid not in states:
                st = initial_state(data, vid)
                if pos > 0:
                    st.pose = states[kf[pos - 1]].pose
                states[vid] = st
        pose_free = [pos >= finalized for pos in range(s, e)]
        depth_free = list(pose_free)
        _optimize_window(
            data, scene, cfg, ids, states, pose_free, depth_free,
            cfg.iters_seq, cfg.lr_seq, full_res=False, log=log,
            tag=f"stage1 window={w_idx}",
        )
        finalized = e
    return states


def sequential_edges(keyframes, tau_set, states) -> dict:
    """Measured Z_ij = P_j P_i^-1 for every in-range keyframe offset."""
    kf = list(getattr(keyframes, "indices", keyframes))
    out = {}
    for tau in sorted(tau_set):
        for p in range(len(kf) - tau):
            i, j = kf[p], kf[p + tau]
            out[(i, j)] = states[j].pose @ states[i].pose.inverse()
    return out


def optimize_covisible_pairs(data: EngineData, scene, accepted_pairs, states,
                             cfg: RunConfig, log: list) -> dict:
    """Stage two: pose-only refinement of each accepted pair in isolation.

    Input states are not modified; each pair optimizes a private copy with
    depth parameters frozen, and only the measured relative pose leaves.
    """
    measured = {}
    bundle = data.quarter
    h, w = bundle.images.shape[1], bundle.images.shape[2]
    for idx, (i, j) in enumerate(accepted_pairs):
        ids = [i, j]
        ws = WindowState(
            ids, [states[i], states[j]],
            bundle.nrm.index_select(0, torch.tensor(ids, dtype=torch.long)),
            data.up_quarter, [True, True], [False, False],
            pose_scale=data.pose_scale, mesh_gain=cfg.mesh_step_gain,
        )
        batch = _build_batch(
            scene, ids, [(0, 1, 1.0, False)], h, w,
            cfg.fb_eps(scene.intrinsics.long_side), full_res=False,
        )
        _run_adam(ws, _window_tensors(bundle, ids), batch, bundle.k,
                  LossWeights.from_config(cfg), cfg.iters_cov,
                  cfg.lr_cov, log, f"stage2 pair={idx}")
        out = ws.export()
        measured[(i, j)] = out[1].pose @ out[0].pose.inverse()
    return measured


def init_nonkeyframe_states(data: EngineData, states: dict, keyframes) -> dict:
    """Interpolate every missing frame from its enclosing keyframes.

    Poses interpolate linearly in twist space; depth parameters carry the
    keyframes' learned corrections (offsets from each frame's own prior
    statistics) so a frame whose prior scale differs from its neighbors
    still starts at a consistent depth.
    """
    kf = sorted(k for k in keyframes if k in states)
    if not kf:
        raise DataError("stage three needs at least one keyframe state")
    n = data.full.n_frames
    out = dict(states)
    for t in range(n):
        if t in out:
            continue
        k0 = max((k for k in kf if k < t), default=kf[0])
        k1 = min((k for k in kf if k > t), default=kf[-1])
        if k0 == k1:
            alpha = 0.0
        else:
            alpha = (t - k0) / (k1 - k0)
        s0, s1 = out[k0], out[k1]
        da = (1 - alpha) * (s0.a - data.mu[k0]) + alpha * (s1.a - data.mu[k1])
        db = (1 - alpha) * (s0.b - data.sigma[k0]) + alpha * (s1.b - data.sigma[k1])
        out[t] = FrameState(
            a=float(data.mu[t] + da),
            b=float(data.sigma[t] + db),
            mesh=(1 - alpha) * s0.mesh + alpha * s1.mesh,
            pose=interpolate_pose(s0.pose, s1.pose, alpha),
        )
    return out


def optimize_nonkeyframes(data: EngineData, scene, states, keyframes,
                          cfg: RunConfig, log: list) -> dict:
    """Stage three: all frames at full resolution, keyframe poses frozen."""
    n = data.full.n_frames
    kf = list(getattr(keyframes, "indices", keyframes))
    kf_set = set(kf)
    states = init_nonkeyframe_states(data, states, kf)
    spans = window_spans(n, cfg.batch_size, max(cfg.tau_set))
    finalized = 0
    for w_idx, (s, e) in enumerate(spans):
        ids = list(range(s, e))
        pose_free = [pos >= finalized and ids[pos - s] not in kf_set
                     for pos in range(s, e)]
        depth_free = [pos >= finalized for pos in range(s, e)]
        _optimize_window(
            data, scene, cfg, ids, states, pose_free, depth_free,
            cfg.iters_nonkey, cfg.lr_nonkey, full_res=True, log=log,
            tag=f"stage3 window={w_idx}",
        )
        finalized = e
    return states
