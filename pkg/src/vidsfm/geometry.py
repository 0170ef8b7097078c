"""Camera geometry on SE(3): poses, projection, rigid flow, bilinear warping.

Conventions, fixed repo-wide:
  - Poses are world-to-camera: X_cam = R @ X_world + t.
  - Twists are (rho, phi): translational part first, rotation in radians.
  - Pixel coordinates are (x, y) with x along width; pixel centers at integers.
  - Behind-camera threshold 1e-6 m. A bilinear sample is valid when its
    coordinates lie inside [0, W-1] x [0, H-1] (support pixels with nonzero
    weight stay in bounds).

All functions are pure; arrays are never mutated in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEPTH_EPS = 1e-6
_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class Intrinsics:
    """Ideal pinhole intrinsics (no distortion)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        if self.width < 1 or self.height < 1:
            raise ValueError("degenerate image size")

    @property
    def long_side(self) -> int:
        return max(self.width, self.height)

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def inv_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, factor: int) -> "Intrinsics":
        """Intrinsics of the image area-downsampled by an integer factor.

        Pixel i of the small image covers full-res pixels [f*i, f*i+f-1], so
        its center sits at f*i + (f-1)/2.
        """
        f = int(factor)
        if f < 1 or self.width % f or self.height % f:
            raise ValueError("downsample factor must divide both dimensions")
        off = (f - 1) / 2.0
        return Intrinsics(
            fx=self.fx / f,
            fy=self.fy / f,
            cx=(self.cx - off) / f,
            cy=(self.cy - off) / f,
            width=self.width // f,
            height=self.height // f,
        )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    # q = (x, y, z, w), unit norm
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(r: np.ndarray) -> np.ndarray:
    # Shepperd's method; returns (x, y, z, w) with w >= 0.
    m00, m01, m02 = r[0]
    m10, m11, m12 = r[1]
    m20, m21, m22 = r[2]
    tr = m00 + m11 + m22
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (m21 - m12) / s
        y = (m02 - m20) / s
        z = (m10 - m01) / s
    elif m00 >= m11 and m00 >= m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2.0
        x = 0.25 * s
        w = (m21 - m12) / s
        y = (m01 + m10) / s
        z = (m02 + m20) / s
    elif m11 >= m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2.0
        y = 0.25 * s
        w = (m02 - m20) / s
        x = (m01 + m10) / s
        z = (m12 + m21) / s
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2.0
        z = 0.25 * s
        w = (m10 - m01) / s
        x = (m02 + m20) / s
        y = (m12 + m21) / s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


class Pose:
    """World-to-camera rigid transform, stored as unit quaternion + translation.

    Quaternion is scalar-last (x, y, z, w) and renormalized on construction,
    so the materialized rotation matrix satisfies R^T R = I to float precision.
    """

    __slots__ = ("q", "t")

    def __init__(self, q: np.ndarray, t: np.ndarray):
        q = np.asarray(q, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("degenerate quaternion")
        self.q = q / n
        self.t = np.asarray(t, dtype=np.float64).reshape(3).copy()

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, r: np.ndarray, t: np.ndarray) -> "Pose":
        r = np.asarray(r, dtype=np.float64)
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation matrix not orthonormal")
        return cls(_matrix_to_quat(r), t)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls.from_rt(m[:3, :3], m[:3, 3])

    @property
    def r(self) -> np.ndarray:
        return _quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    def inverse(self) -> "Pose":
        rt = self.r.T
        return Pose(np.array([-self.q[0], -self.q[1], -self.q[2], self.q[3]]), -rt @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        # (self o other): apply other first.
        q1, t1 = self.q, self.t
        q2 = other.q
        x1, y1, z1, w1 = q1
        x2, y2, z2, w2 = q2
        q = np.array(
            [
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            ]
        )
        return Pose(q, self.r @ other.t + t1)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.r.T + self.t

    def camera_center(self) -> np.ndarray:
        return -(self.r.T @ self.t)

    def __repr__(self):
        return f"Pose(q={self.q}, t={self.t})"


def _hat(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def _so3_exp_and_v(phi: np.ndarray):
    """Rodrigues rotation and the SE(3) V matrix for a rotation vector."""
    theta = np.linalg.norm(phi)
    k = _hat(phi)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        # Taylor to second order; below the threshold higher terms vanish in f64.
        r = np.eye(3) + k + 0.5 * k2
        v = np.eye(3) + 0.5 * k + k2 / 6.0
        return r, v
    s, c = np.sin(theta), np.cos(theta)
    t2 = theta * theta
    r = np.eye(3) + (s / theta) * k + ((1.0 - c) / t2) * k2
    v = np.eye(3) + ((1.0 - c) / t2) * k + ((theta - s) / (t2 * theta)) * k2
    return r, v


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map: twist (rho, phi) -> Pose with R=exp(phi^), t=V(phi) rho."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("non-finite twist")
    rho, phi = xi[:3], xi[3:]
    r, v = _so3_exp_and_v(phi)
    return Pose(_matrix_to_quat(r), v @ rho)


def se3_log(p: Pose) -> np.ndarray:
    """Principal-branch logarithm; errors within 1e-9 of the pi branch cut."""
    r = p.r
    cos_theta = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta > np.pi - 1e-9:
        raise ValueError("logarithm near branch cut")
    if theta < _SMALL_ANGLE:
        phi = np.array(
            [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
        ) * 0.5
    else:
        phi = (
            np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
            * theta
            / (2.0 * np.sin(theta))
        )
    k = _hat(phi)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        v_inv = np.eye(3) - 0.5 * k + k2 / 12.0
    else:
        t2 = theta * theta
        # V^{-1} = I - k/2 + (1/t^2)(1 - t sin t / (2 (1 - cos t))) k^2
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / t2
        v_inv = np.eye(3) - 0.5 * k + coef * k2
    rho = v_inv @ p.t
    return np.concatenate([rho, phi])


# Batched matrix-form helpers used by the pose-graph solver. Semantics match
# se3_exp / se3_log; inputs and outputs are stacks of 4x4 matrices / 6-twists.


def se3_exp_batch(xi: np.ndarray) -> np.ndarray:
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    n = xi.shape[0]
    rho, phi = xi[:, :3], xi[:, 3:]
    theta = np.linalg.norm(phi, axis=1)
    small = theta < _SMALL_ANGLE
    th = np.where(small, 1.0, theta)

    k = np.zeros((n, 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -phi[:, 2], phi[:, 1]
    k[:, 1, 0], k[:, 1, 2] = phi[:, 2], -phi[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -phi[:, 1], phi[:, 0]
    k2 = k @ k

    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / th**2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (th - np.sin(th)) / th**3)

    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    r = eye + a[:, None, None] * k + b[:, None, None] * k2
    v = eye + b[:, None, None] * k + c[:, None, None] * k2

    out = np.zeros((n, 4, 4))
    out[:, :3, :3] = r
    out[:, :3, 3] = np.einsum("nij,nj->ni", v, rho)
    out[:, 3, 3] = 1.0
    return out


def se3_log_batch(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    r = m[:, :3, :3]
    t = m[:, :3, 3]
    n = m.shape[0]
    tr = np.clip((np.trace(r, axis1=1, axis2=2) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(tr)
    if np.any(theta > np.pi - 1e-9):
        raise ValueError("logarithm near branch cut")
    small = theta < _SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    w = np.stack(
        [
            r[:, 2, 1] - r[:, 1, 2],
            r[:, 0, 2] - r[:, 2, 0],
            r[:, 1, 0] - r[:, 0, 1],
        ],
        axis=1,
    )
    scale = np.where(small, 0.5 + theta**2 / 12.0, th / (2.0 * np.sin(th)))
    phi = w * scale[:, None]

    k = np.zeros((n, 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -phi[:, 2], phi[:, 1]
    k[:, 1, 0], k[:, 1, 2] = phi[:, 2], -phi[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -phi[:, 1], phi[:, 0]
    k2 = k @ k
    coef = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        (1.0 - th * np.sin(th) / (2.0 * (1.0 - np.cos(th)))) / th**2,
    )
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    v_inv = eye - 0.5 * k + coef[:, None, None] * k2
    rho = np.einsum("nij,nj->ni", v_inv, t)
    return np.concatenate([rho, phi], axis=1)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of (x, y) pixel-center coordinates."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def backproject(xy: np.ndarray, depth, k: Intrinsics) -> np.ndarray:
    """Pixels + depths -> 3D points in the camera frame: d * K^-1 * (x, y, 1)."""
    xy = np.asarray(xy, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("non-positive depth")
    x = (xy[..., 0] - k.cx) / k.fx
    y = (xy[..., 1] - k.cy) / k.fy
    return np.stack([x * depth, y * depth, depth], axis=-1)


def project(pts: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Camera-frame points -> pixel coordinates (no validity handling)."""
    pts = np.asarray(pts, dtype=np.float64)
    z = pts[..., 2]
    return np.stack(
        [k.fx * pts[..., 0] / z + k.cx, k.fy * pts[..., 1] / z + k.cy], axis=-1
    )


def reproject(xy, depth, pose_a: Pose, pose_b: Pose, k: Intrinsics):
    """Map frame-a pixels with depths into frame b.

    Returns (xy_b, depth_b, valid); valid is False where depth_b <= 1e-6
    (behind camera). xy_b at invalid points is computed from a clamped
    denominator and should not be used.
    """
    xy = np.asarray(xy, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.array_equal(pose_a.q, pose_b.q) and np.array_equal(pose_a.t, pose_b.t):
        # identical poses reproject exactly onto themselves
        return xy.copy(), depth.copy(), np.ones(xy.shape[:-1], dtype=bool)
    rel = pose_b @ pose_a.inverse()
    pts = backproject(xy, depth, k)
    pts_b = pts @ rel.r.T + rel.t
    z = pts_b[..., 2]
    valid = z > DEPTH_EPS
    z_safe = np.where(valid, z, DEPTH_EPS)
    xb = k.fx * pts_b[..., 0] / z_safe + k.cx
    yb = k.fy * pts_b[..., 1] / z_safe + k.cy
    return np.stack([xb, yb], axis=-1), z, valid


def in_bounds(xy: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear-sample validity: coordinates inside [0, W-1] x [0, H-1]."""
    x, y = xy[..., 0], xy[..., 1]
    return (x >= 0.0) & (x <= width - 1.0) & (y >= 0.0) & (y <= height - 1.0)


def rigid_flow(depth: np.ndarray, pose_a: Pose, pose_b: Pose, k: Intrinsics):
    """Flow induced by camera motion over a depth map.

    Returns (flow HxWx2, valid HxW). Invalid where the point lands behind the
    camera or outside the target image; the flow value is still the computed
    displacement there, so consumers must honor the mask.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    grid = pixel_grid(h, w)
    xy_b, _, valid = reproject(grid, depth, pose_a, pose_b, k)
    valid = valid & in_bounds(xy_b, w, h)
    return xy_b - grid, valid


def warp_bilinear(src: np.ndarray, flow: np.ndarray):
    """Sample src at x + flow(x) with bilinear weights.

    src: (H, W) or (H, W, C). Returns (warped, valid); warped is 0 where
    invalid. Integer coordinates on the far border are valid (their support
    reduces to a single pixel).
    """
    src = np.asarray(src, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., None]
    h, w, c = src.shape
    grid = pixel_grid(h, w)
    pos = grid + np.asarray(flow, dtype=np.float64)
    x, y = pos[..., 0], pos[..., 1]
    valid = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)

    x0 = np.clip(np.floor(x), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, h - 2).astype(np.int64)
    wx = np.clip(x - x0, 0.0, 1.0)
    wy = np.clip(y - y0, 0.0, 1.0)

    p00 = src[y0, x0]
    p01 = src[y0, x0 + 1]
    p10 = src[y0 + 1, x0]
    p11 = src[y0 + 1, x0 + 1]
    top = p00 * (1.0 - wx[..., None]) + p01 * wx[..., None]
    bot = p10 * (1.0 - wx[..., None]) + p11 * wx[..., None]
    out = top * (1.0 - wy[..., None]) + bot * wy[..., None]
    out = np.where(valid[..., None], out, 0.0)
    if squeeze:
        out = out[..., 0]
    return out, valid
