"""Multi-term objective for joint depth and pose refinement.

All terms run batched over a leading pair (or frame) axis in float64
torch. Per-pair terms reduce to a per-row mean over that row's own valid
set; rows with an empty valid set contribute exactly zero and are counted
in the diagnostics instead of raising. Division and sqrt are always fed
masked-safe denominators so no NaN can leak into the backward pass
through an excluded pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as tf

from .diffgeom import bilinear_sample_t, pixel_grid_t, reproject_t
from .geometry import Intrinsics

_SSIM_C1 = 1e-4
_SSIM_C2 = 9e-4
_GRAD_NORM_EPS = 1e-8
_GRAD_SCALES = (0, 1, 2)


@dataclass(frozen=True)
class LossWeights:
    photo: float = 1.0
    flow: float = 10.0
    const: float = 0.5
    grad: float = 0.1
    deform: float = 0.5
    w_dyn: float = 4.0

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(
            photo=cfg.lambda_photo,
            flow=cfg.lambda_flow,
            const=cfg.lambda_const,
            grad=cfg.lambda_grad,
            deform=cfg.lambda_deform,
            w_dyn=cfg.w_dyn,
        )


@dataclass
class PairBatch:
    """Directed pair rows over a stacked frame window.

    Each undirected pair occupies two rows (a->b and b->a) so every term
    is evaluated bidirectionally in one pass. `weight` repeats the pair
    weight on both rows; `flow_prior` / `fb_valid` are zeros / all-False
    on rows without a usable prior flow (the flow term then vanishes).
    """

    ref: torch.Tensor  # (R,) long, reference frame position
    src: torch.Tensor  # (R,) long, source frame position
    weight: torch.Tensor  # (R,) float64
    adjacent: torch.Tensor  # (R,) bool
    flow_prior: torch.Tensor  # (R, H, W, 2) float64, ref -> src
    fb_valid: torch.Tensor  # (R, H, W) bool

    @property
    def n_rows(self) -> int:
        return int(self.ref.shape[0])


def _masked_row_mean(values: torch.Tensor, valid: torch.Tensor):
    """Mean of `values` over True pixels, per row; empty rows give 0."""
    v = valid.to(values.dtype)
    count = v.sum(dim=(1, 2))
    total = (values * v).sum(dim=(1, 2))
    return total / torch.clamp(count, min=1.0), count


def _avg3(x: torch.Tensor) -> torch.Tensor:
    # Border windows average over the pixels actually present.
    return tf.avg_pool2d(x, 3, stride=1, padding=1, count_include_pad=False)


def dssim_map(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """(1 - SSIM)/2 per pixel with 3x3 mean windows; inputs (R, H, W)."""
    x = x.unsqueeze(1)
    y = y.unsqueeze(1)
    mu_x = _avg3(x)
    mu_y = _avg3(y)
    var_x = _avg3(x * x) - mu_x * mu_x
    var_y = _avg3(y * y) - mu_y * mu_y
    cov = _avg3(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return ((1.0 - num / den) * 0.5).squeeze(1)


def photometric_terms(
    img_ref: torch.Tensor,
    img_src: torch.Tensor,
    depth_ref: torch.Tensor,
    t_rel: torch.Tensor,
    k: Intrinsics,
    mask_ref: torch.Tensor,
):
    """Per-row photometric loss: mean |warp(I_src) - I_ref| + DSSIM.

    Valid set is warp validity intersected with the static mask of the
    reference frame. Invalid warped pixels are replaced by the reference
    value before the DSSIM windowing so border windows are not polluted
    by clamped samples; those pixels are excluded from the mean anyway.
    """
    xy, _, in_front = reproject_t(depth_ref, t_rel, k)
    warped, in_b = bilinear_sample_t(img_src.unsqueeze(1), xy)
    warped = warped.squeeze(1)
    valid = in_front & in_b & mask_ref
    filled = torch.where(valid, warped, img_ref)
    per_pixel = (filled - img_ref).abs() + dssim_map(filled, img_ref)
    return _masked_row_mean(per_pixel, valid)


def flow_terms(flow_rigid: torch.Tensor, flow_prior: torch.Tensor, valid: torch.Tensor):
    """Per-row mean of |du| + |dv| between rigid and prior flow."""
    diff = (flow_rigid - flow_prior).abs().sum(dim=-1)
    return _masked_row_mean(diff, valid)


def consistency_terms(
    depth_ref: torch.Tensor,
    depth_src: torch.Tensor,
    t_rel: torch.Tensor,
    k: Intrinsics,
):
    """Per-row mean of |d_proj - d_sampled| / (d_proj + d_sampled).

    d_proj is the reference depth carried into the source camera (the z
    of the transformed point); d_sampled resamples the source depth map
    at the warped coordinate. Only warp validity gates the mean: depth
    agreement is meaningful on dynamic pixels too because the prior flow
    plays no part here.
    """
    xy, z, in_front = reproject_t(depth_ref, t_rel, k)
    sampled, in_b = bilinear_sample_t(depth_src.unsqueeze(1), xy)
    sampled = sampled.squeeze(1)
    valid = in_front & in_b
    den = z + sampled
    den_safe = torch.where(valid, den, torch.ones_like(den))
    ratio = (z - sampled).abs() / den_safe
    return _masked_row_mean(ratio, valid)


def _forward_diffs(d: torch.Tensor):
    gx = d[:, :-1, 1:] - d[:, :-1, :-1]
    gy = d[:, 1:, :-1] - d[:, :-1, :-1]
    return gx, gy


def gradient_terms(depth: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """Per-frame orientation mismatch of depth gradients across 3 scales.

    Each scale halves resolution by area mean; per scale the squared
    (1 - cos angle) between forward-difference gradients is averaged over
    pixels where both gradients are above the degeneracy threshold.
    """
    out = torch.zeros(depth.shape[0], dtype=depth.dtype)
    d, p = depth, prior
    for s in _GRAD_SCALES:
        if s > 0:
            if min(d.shape[1], d.shape[2]) < 2:
                break
            d = tf.avg_pool2d(d.unsqueeze(1), 2, 2).squeeze(1)
            p = tf.avg_pool2d(p.unsqueeze(1), 2, 2).squeeze(1)
        if d.shape[1] < 2 or d.shape[2] < 2:
            continue
        gx, gy = _forward_diffs(d)
        px, py = _forward_diffs(p)
        n2_g = gx * gx + gy * gy
        n2_p = px * px + py * py
        keep = (n2_g >= _GRAD_NORM_EPS**2) & (n2_p >= _GRAD_NORM_EPS**2)
        keep = keep.detach()
        ones = torch.ones_like(n2_g)
        norm_g = torch.sqrt(torch.where(keep, n2_g, ones))
        norm_p = torch.sqrt(torch.where(keep, n2_p, ones))
        cos = (gx * px + gy * py) / (norm_g * norm_p)
        term = (1.0 - cos) ** 2
        kf = keep.to(d.dtype)
        count = kf.sum(dim=(1, 2))
        out = out + (term * kf).sum(dim=(1, 2)) / torch.clamp(count, min=1.0)
    return out


def deform_terms(
    mesh: torch.Tensor, static_vertex: torch.Tensor, w_dyn: float
) -> torch.Tensor:
    """Per-frame mean over 4-connected vertex pairs of w * (m_u - m_v)^2.

    A pair weighs 1 when both endpoints sit on static-majority image
    footprints, w_dyn otherwise; the mean divides by the pair count, not
    the weight sum, so raising w_dyn only raises dynamic-pair cost.
    """
    f, gh, gw = mesh.shape
    sv = static_vertex.to(mesh.dtype)
    dh = mesh[:, :, 1:] - mesh[:, :, :-1]
    wh = torch.where(
        (sv[:, :, 1:] * sv[:, :, :-1]) > 0.5,
        torch.ones_like(dh),
        torch.full_like(dh, w_dyn),
    )
    dv = mesh[:, 1:, :] - mesh[:, :-1, :]
    wv = torch.where(
        (sv[:, 1:, :] * sv[:, :-1, :]) > 0.5,
        torch.ones_like(dv),
        torch.full_like(dv, w_dyn),
    )
    n_pairs = gh * (gw - 1) + (gh - 1) * gw
    total = (wh * dh * dh).sum(dim=(1, 2)) + (wv * dv * dv).sum(dim=(1, 2))
    return total / float(n_pairs)


def total_loss(
    images: torch.Tensor,
    masks: torch.Tensor,
    prior_depths: torch.Tensor,
    static_vertex: torch.Tensor,
    depths: torch.Tensor,
    poses: torch.Tensor,
    meshes: torch.Tensor,
    batch: PairBatch,
    k: Intrinsics,
    weights: LossWeights,
):
    """Weighted sum over directed pair rows plus per-frame terms.

    Returns (total, breakdown, diagnostics). The breakdown holds the five
    weighted tensors whose sum constructs the total, so the bookkeeping
    identity is exact. Diagnostics counts rows whose valid set was empty.
    """
    grid = pixel_grid_t(images.shape[1], images.shape[2])

    ref, src = batch.ref, batch.src
    img_ref = images.index_select(0, ref)
    img_src = images.index_select(0, src)
    mask_ref = masks.index_select(0, ref)
    depth_ref = depths.index_select(0, ref)
    depth_src = depths.index_select(0, src)
    pose_ref = poses.index_select(0, ref)
    pose_src = poses.index_select(0, src)
    t_rel = pose_src @ torch.linalg.inv(pose_ref)

    xy, z, in_front = reproject_t(depth_ref, t_rel, k)
    # Rows whose two poses are bitwise equal map every pixel to itself, but
    # the float round-trip leaves ulp-scale residue that the L1 kinks turn
    # into spurious sign gradients. Pin those rows to the exact identity
    # warp; the correction is detached so gradients still flow through the
    # raw reprojection.
    same = (pose_src == pose_ref).flatten(1).all(dim=1)
    if bool(same.any()):
        zero = torch.zeros((), dtype=xy.dtype)
        xy = xy + torch.where(same[:, None, None, None], grid - xy, zero).detach()
        z = z + torch.where(same[:, None, None], depth_ref - z, zero).detach()
    warped_img, in_b = bilinear_sample_t(img_src.unsqueeze(1), xy)
    warped_img = warped_img.squeeze(1)
    warped_depth, _ = bilinear_sample_t(depth_src.unsqueeze(1), xy)
    warped_depth = warped_depth.squeeze(1)
    proj_valid = in_front & in_b

    # Photometric: L1 + DSSIM over warp-valid static pixels of the reference.
    valid_p = proj_valid & mask_ref
    filled = torch.where(valid_p, warped_img, img_ref)
    photo_px = (filled - img_ref).abs() + dssim_map(filled, img_ref)
    photo_rows, photo_n = _masked_row_mean(photo_px, valid_p)

    # Flow: rigid displacement vs prior flow over fb-consistent warp-valid set.
    flow_rigid = xy - grid
    valid_f = proj_valid & batch.fb_valid
    flow_px = (flow_rigid - batch.flow_prior).abs().sum(dim=-1)
    flow_rows, flow_n = _masked_row_mean(flow_px, valid_f)
    flow_rows = flow_rows * batch.adjacent.to(flow_rows.dtype)

    # Depth consistency: projected vs resampled depth over the warp-valid set.
    den = z + warped_depth
    den_safe = torch.where(proj_valid, den, torch.ones_like(den))
    const_px = (z - warped_depth).abs() / den_safe
    const_rows, const_n = _masked_row_mean(const_px, proj_valid)

    w = batch.weight
    photo_total = weights.photo * (w * photo_rows).sum()
    flow_total = weights.flow * (w * flow_rows).sum()
    const_total = weights.const * (w * const_rows).sum()
    grad_total = weights.grad * gradient_terms(depths, prior_depths).sum()
    deform_total = weights.deform * deform_terms(
        meshes, static_vertex, weights.w_dyn
    ).sum()

    total = photo_total + flow_total + const_total + grad_total + deform_total
    breakdown = {
        "photo": photo_total,
        "flow": flow_total,
        "const": const_total,
        "grad": grad_total,
        "deform": deform_total,
    }
    adjacent = batch.adjacent
    diagnostics = {
        "photo_empty": int((photo_n == 0).sum()),
        "flow_empty": int(((flow_n == 0) & adjacent).sum()),
        "const_empty": int((const_n == 0).sum()),
    }
    return total, breakdown, diagnostics
