"""Flow-guided temporal depth filter.

Each output frame is a per-pixel weighted blend of nearby depth maps
reprojected into its view and aligned through chained adjacent flows.
Weights decay with the depth ratio between the frame's own estimate and a
neighbor's aligned value (gamma_ratio) and with the forward-backward
inconsistency of the chained flow (gamma_flow), so unreliable neighbors
fade out instead of being hard-rejected. Weights are normalized per pixel;
the self term always contributes, which bounds the result between the
smallest and largest contributing depth.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .geometry import Intrinsics, Pose, pixel_grid, reproject, warp_bilinear

# bilinear samples of a {0,1} validity raster count as valid only when the
# whole support is valid; tolerance absorbs interpolation round-off
_FULL_SUPPORT = 1.0 - 1e-9


def _sample_with_mask(raster: np.ndarray, mask: np.ndarray, flow: np.ndarray):
    """Sample raster and its validity mask at x + flow.

    A sampled pixel is valid only when the sample position is in bounds and
    all four support pixels are themselves valid.
    """
    sampled, in_b = warp_bilinear(raster, flow)
    mask_cov, _ = warp_bilinear(mask.astype(np.float64), flow)
    return sampled, in_b & (mask_cov >= _FULL_SUPPORT)


def chain_flow(flows_fwd, flows_bwd, i: int, t: int):
    """Compose adjacent flows into the displacement field i -> t.

    flows_fwd[u] maps u -> u+1, flows_bwd[u] maps u -> u-1. Stepping one
    frame at a time, the running flow is extended by sampling the next
    adjacent flow at the currently displaced position. Returns
    (flow (H, W, 2), valid (H, W)); a pixel is valid only if every
    intermediate sample stayed in bounds.
    """
    flows = flows_fwd if t >= i else flows_bwd
    step = 1 if t >= i else -1
    ref = next(
        (f for f in list(flows_fwd) + list(flows_bwd) if f is not None), None
    )
    if ref is None:
        raise DataError("chain_flow needs at least one adjacent flow")
    h, w = ref.shape[:2]
    flow = np.zeros((h, w, 2), dtype=np.float64)
    valid = np.ones((h, w), dtype=bool)
    cur = i
    while cur != t:
        adj = flows[cur]
        if adj is None:
            raise DataError(f"missing adjacent flow at frame {cur}")
        sampled, in_b = warp_bilinear(np.asarray(adj, dtype=np.float64), flow)
        flow = flow + sampled
        valid &= in_b
        cur += step
    return flow, valid


def fb_inconsistency(flow_it, valid_it, flow_ti, valid_ti):
    """Per-pixel forward-backward error of a chained flow pair.

    diff(x) = || F_{i->t}(x) + F_{t->i}(x + F_{i->t}(x)) ||_2. Pixels where
    either chain is invalid (at x, or at the displaced position) carry +inf
    so any exp(-gamma * diff) weight vanishes.
    """
    back, ok = _sample_with_mask(flow_ti, valid_ti, flow_it)
    diff = np.linalg.norm(flow_it + back, axis=-1)
    return np.where(valid_it & ok, diff, np.inf)


def reprojected_depth(depth_i, pose_i: Pose, pose_t: Pose, k: Intrinsics,
                      chained_flow_ti, chain_valid_ti):
    """Depth of frame i expressed in frame t's camera, on t's pixel grid.

    The depth channel of frame i's reprojection lives on i's pixel grid;
    the chained flow t -> i supplies the correspondence that pulls it onto
    frame t's grid. Returns (depth (H, W), valid (H, W)).
    """
    depth_i = np.asarray(depth_i, dtype=np.float64)
    h, w = depth_i.shape
    _, z_in_t, in_front = reproject(pixel_grid(h, w), depth_i, pose_i, pose_t, k)
    sampled, ok = _sample_with_mask(z_in_t, in_front, chained_flow_ti)
    return sampled, chain_valid_ti & ok


def filter_depth(t: int, depths, poses, k: Intrinsics, flows_fwd, flows_bwd,
                 gamma_ratio: float, gamma_flow: float, span: int):
    """Blend frames t-span .. t+span into a consistent depth for frame t.

    Weight of neighbor i at pixel x:
        w = exp(-gamma_ratio * max(d_t, d_it) / min(d_t, d_it)
                - gamma_flow * fb_diff(x))
    normalized over the contributing frames. Normalization makes the common
    factor exp(-gamma_ratio) of the self term (ratio 1, zero flow error)
    cancel, so it is divided out before exponentiating; a pixel no neighbor
    can see then passes through bit-exactly.
    """
    n = len(depths)
    if not 0 <= t < n:
        raise DataError(f"frame {t} outside video of {n} frames")
    d_t = np.asarray(depths[t], dtype=np.float64)
    lo, hi = max(0, t - span), min(n - 1, t + span)

    accum = np.zeros_like(d_t)
    weight_sum = np.zeros_like(d_t)
    for i in range(lo, hi + 1):
        if i == t:
            d_it = d_t
            fdiff = np.zeros_like(d_t)
            valid = np.ones(d_t.shape, dtype=bool)
        else:
            f_ti, v_ti = chain_flow(flows_fwd, flows_bwd, t, i)
            f_it, v_it = chain_flow(flows_fwd, flows_bwd, i, t)
            fdiff = fb_inconsistency(f_ti, v_ti, f_it, v_it)
            d_it, valid = reprojected_depth(depths[i], poses[i], poses[t], k,
                                            f_ti, v_ti)
            valid &= np.isfinite(fdiff)
        d_safe = np.where(valid, np.maximum(d_it, 1e-12), 1.0)
        ratio = np.maximum(d_t, d_safe) / np.minimum(d_t, d_safe)
        w = np.where(valid,
                     np.exp(-gamma_ratio * (ratio - 1.0)
                            - gamma_flow * np.where(valid, fdiff, 0.0)),
                     0.0)
        accum += w * np.where(valid, d_it, 0.0)
        weight_sum += w
    return accum / weight_sum


def filter_video(depths, poses, k: Intrinsics, flows_fwd, flows_bwd, config):
    """Apply the temporal filter to every frame of a video."""
    if len(depths) != len(poses):
        raise DataError(
            f"{len(depths)} depths vs {len(poses)} poses in filter input"
        )
    return [
        filter_depth(t, depths, poses, k, flows_fwd, flows_bwd,
                     config.gamma_ratio, config.gamma_flow, config.filter_span)
        for t in range(len(depths))
    ]
