"""Differentiable geometry kernels (torch, float64, CPU).

Mirrors the numpy geometry module closely enough that values agree to
~1e-12: same clamped bilinear-sampling rule, same exponential-map Taylor
switch, same validity conventions. Everything here is batched over a
leading frame/pair axis and differentiable end to end; integer sampling
indices are detached, so gradients flow through the fractional weights
only, which is the standard subgradient choice for bilinear warps.
"""

from __future__ import annotations

import torch

from .geometry import DEPTH_EPS, Intrinsics

_SMALL_ANGLE = 1e-8


def so3_exp_t(phi: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, (..., 3) -> (..., 3, 3), Taylor branch near zero."""
    theta2 = (phi * phi).sum(-1)
    theta = torch.sqrt(torch.clamp(theta2, min=0.0))
    small = theta < _SMALL_ANGLE
    # Guarded values keep the non-taken branch finite so autograd stays clean.
    th2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta_safe = torch.sqrt(th2_safe)
    sin_c = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta_safe) / theta_safe)
    cos_c = torch.where(
        small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta_safe)) / th2_safe
    )
    k = hat_t(phi)
    eye = torch.eye(3, dtype=phi.dtype).expand(*phi.shape[:-1], 3, 3)
    return eye + sin_c[..., None, None] * k + cos_c[..., None, None] * (k @ k)


def hat_t(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[..., 0])
    rows = [
        torch.stack([zero, -v[..., 2], v[..., 1]], dim=-1),
        torch.stack([v[..., 2], zero, -v[..., 0]], dim=-1),
        torch.stack([-v[..., 1], v[..., 0], zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def se3_exp_t(xi: torch.Tensor) -> torch.Tensor:
    """Twist (rho, phi) -> (..., 4, 4) rigid transform, translation-first."""
    rho, phi = xi[..., :3], xi[..., 3:]
    theta2 = (phi * phi).sum(-1)
    theta = torch.sqrt(torch.clamp(theta2, min=0.0))
    small = theta < _SMALL_ANGLE
    th2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta_safe = torch.sqrt(th2_safe)
    # V = I + ((1-cos)/th^2) K + ((th-sin)/th^3) K^2
    b = torch.where(
        small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta_safe)) / th2_safe
    )
    c = torch.where(
        small,
        1.0 / 6.0 - theta2 / 120.0,
        (theta_safe - torch.sin(theta_safe)) / (th2_safe * theta_safe),
    )
    k = hat_t(phi)
    eye = torch.eye(3, dtype=xi.dtype).expand(*xi.shape[:-1], 3, 3)
    v = eye + b[..., None, None] * k + c[..., None, None] * (k @ k)
    r = so3_exp_t(phi)
    t = (v @ rho.unsqueeze(-1)).squeeze(-1)
    out = torch.zeros(*xi.shape[:-1], 4, 4, dtype=xi.dtype)
    out[..., :3, :3] = r
    out[..., :3, 3] = t
    out[..., 3, 3] = 1.0
    return out


def inv_se3_t(t: torch.Tensor) -> torch.Tensor:
    rt = t[..., :3, :3].transpose(-1, -2)
    out = torch.zeros_like(t)
    out[..., :3, :3] = rt
    out[..., :3, 3] = -(rt @ t[..., :3, 3].unsqueeze(-1)).squeeze(-1)
    out[..., 3, 3] = 1.0
    return out


def pixel_grid_t(h: int, w: int) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=torch.float64),
        torch.arange(w, dtype=torch.float64),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)  # (H, W, 2) with x first


def reproject_t(depth: torch.Tensor, t_rel: torch.Tensor, k: Intrinsics):
    """Map every pixel of frame a into frame b.

    depth: (B, H, W) of frame a; t_rel: (B, 4, 4) = P_b P_a^-1.
    Returns (xy_b (B,H,W,2), z_b (B,H,W), in_front (B,H,W) bool detached).
    z is clamped away from zero for the projection division only; in_front
    records the true sign test.
    """
    b, h, w = depth.shape
    grid = pixel_grid_t(h, w)
    x_cam = torch.empty(b, h, w, 3, dtype=depth.dtype)
    ray_x = (grid[..., 0] - k.cx) / k.fx
    ray_y = (grid[..., 1] - k.cy) / k.fy
    x_cam = torch.stack(
        [ray_x.expand(b, h, w) * depth, ray_y.expand(b, h, w) * depth, depth],
        dim=-1,
    )
    rot = t_rel[:, :3, :3]
    trans = t_rel[:, :3, 3]
    x_b = torch.einsum("bij,bhwj->bhwi", rot, x_cam) + trans[:, None, None, :]
    z = x_b[..., 2]
    in_front = (z > DEPTH_EPS).detach()
    z_safe = torch.clamp(z, min=DEPTH_EPS)
    xy = torch.stack(
        [
            k.fx * x_b[..., 0] / z_safe + k.cx,
            k.fy * x_b[..., 1] / z_safe + k.cy,
        ],
        dim=-1,
    )
    return xy, z, in_front


def bilinear_sample_t(src: torch.Tensor, xy: torch.Tensor):
    """Sample (B, C, H, W) at xy (B, H', W', 2) absolute pixel coords.

    Index clamping and the validity rule match the numpy warp: corner
    indices clamp to [0, n-2], fractional weights to [0, 1], so integer
    coordinates on the far border sample exactly; valid iff the coordinate
    lies inside [0, n-1] on both axes. Values outside are still finite
    (clamped-border samples) and must be masked by the caller.
    """
    b, c, h, w = src.shape
    x = xy[..., 0]
    y = xy[..., 1]
    x0 = torch.clamp(torch.floor(x), 0.0, float(w - 2)).detach()
    y0 = torch.clamp(torch.floor(y), 0.0, float(h - 2)).detach()
    wx = torch.clamp(x - x0, 0.0, 1.0)
    wy = torch.clamp(y - y0, 0.0, 1.0)
    ix0 = x0.long()
    iy0 = y0.long()
    ix1 = ix0 + 1
    iy1 = iy0 + 1

    flat = src.reshape(b, c, h * w)

    def take(iy, ix):
        idx = (iy * w + ix).reshape(b, 1, -1).expand(b, c, -1)
        return torch.gather(flat, 2, idx).reshape(b, c, *x.shape[1:])

    v00 = take(iy0, ix0)
    v01 = take(iy0, ix1)
    v10 = take(iy1, ix0)
    v11 = take(iy1, ix1)
    wx_ = wx.unsqueeze(1)
    wy_ = wy.unsqueeze(1)
    out = (
        v00 * (1 - wx_) * (1 - wy_)
        + v01 * wx_ * (1 - wy_)
        + v10 * (1 - wx_) * wy_
        + v11 * wx_ * wy_
    )
    valid = (
        (x >= 0.0) & (x <= float(w - 1)) & (y >= 0.0) & (y <= float(h - 1))
    ).detach()
    return out, valid


class MeshUpsampler:
    """Precomputed bilinear lift of a coarse grid to image resolution.

    Vertex (0, 0) pins to pixel (0, 0) and vertex (gw-1, gh-1) to pixel
    (W-1, H-1); interpolation is separable bilinear. The index/weight
    tensors are fixed, so applying the upsampler is one gather + weighted
    sum and exactly linear (hence exactly differentiable) in the mesh.
    """

    def __init__(self, gh: int, gw: int, h: int, w: int):
        if gh < 2 or gw < 2:
            raise ValueError("mesh grid must be at least 2x2")
        self.gh, self.gw, self.h, self.w = gh, gw, h, w
        u = torch.arange(w, dtype=torch.float64) * (gw - 1) / (w - 1)
        v = torch.arange(h, dtype=torch.float64) * (gh - 1) / (h - 1)
        iu0 = torch.clamp(torch.floor(u), 0.0, float(gw - 2)).long()
        iv0 = torch.clamp(torch.floor(v), 0.0, float(gh - 2)).long()
        self.wu = (u - iu0.to(torch.float64)).clamp(0.0, 1.0)  # (W,)
        self.wv = (v - iv0.to(torch.float64)).clamp(0.0, 1.0)  # (H,)
        self.iu0, self.iv0 = iu0, iv0

    def __call__(self, mesh: torch.Tensor) -> torch.Tensor:
        """(B, gh, gw) -> (B, H, W)."""
        m00 = mesh[:, self.iv0][:, :, self.iu0]
        m01 = mesh[:, self.iv0][:, :, self.iu0 + 1]
        m10 = mesh[:, self.iv0 + 1][:, :, self.iu0]
        m11 = mesh[:, self.iv0 + 1][:, :, self.iu0 + 1]
        wu = self.wu[None, None, :]
        wv = self.wv[None, :, None]
        return (
            m00 * (1 - wu) * (1 - wv)
            + m01 * wu * (1 - wv)
            + m10 * (1 - wu) * wv
            + m11 * wu * wv
        )


def mesh_grid_shape(h: int, w: int, long_side: int = 17):
    """Grid dims whose long side is `long_side`, short side scaled to match."""
    if w >= h:
        gw = long_side
        gh = max(2, int(round(long_side * h / w)))
    else:
        gh = long_side
        gw = max(2, int(round(long_side * w / h)))
    return gh, gw
