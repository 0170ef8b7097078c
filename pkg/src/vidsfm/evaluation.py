"""Trajectory and depth-map metrics.

Trajectories are world-to-camera Pose lists (the internal convention); the
relative-pose formulas below operate on camera-to-world transforms, which is
where the usual textbook expressions live. Depth metrics follow the standard
monocular protocol: per-frame median scaling, then AbsRel / SqRel / RMSE and
the delta < 1.25 inlier fraction, averaged over frames.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import Pose

__all__ = [
    "umeyama_align",
    "ate",
    "rpe",
    "depth_metrics",
    "DepthMetrics",
    "metrics_kv_text",
    "metrics_csv",
]


def _positions(traj) -> np.ndarray:
    """Camera centers of a world-to-camera Pose list, (N, 3)."""
    return np.stack([-p.r.T @ p.t for p in traj])


def umeyama_align(est: np.ndarray, gt: np.ndarray, with_scale: bool = True):
    """Least-squares similarity (s, R, t) minimizing sum ||gt - (s R est + t)||^2.

    est, gt: (N, 3) point arrays in correspondence, N >= 3 and not
    collinear. Closed form via the cross-covariance SVD; the sign of the
    smallest singular direction is flipped when needed so det(R) = +1.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise DataError(
            f"umeyama_align needs matching (N, 3) arrays, got {est.shape} vs {gt.shape}"
        )
    n = est.shape[0]
    if n < 3:
        raise DataError(f"umeyama_align needs >= 3 correspondences, got {n}")

    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    ec = est - mu_e
    gc = gt - mu_g
    cov = gc.T @ ec / n
    u, s, vt = np.linalg.svd(cov)
    # collinear or coincident inputs leave the similarity underdetermined
    scale_ref = float(np.sqrt((ec * ec).sum() / n) * np.sqrt((gc * gc).sum() / n))
    if scale_ref == 0.0 or s[1] <= 1e-12 * max(s[0], scale_ref):
        raise DataError("umeyama_align: degenerate (collinear or coincident) points")
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    var_e = float((ec * ec).sum() / n)
    scale = float((s * d).sum() / var_e) if with_scale else 1.0
    t = mu_g - scale * rot @ mu_e
    return scale, rot, t


def ate(est_traj, gt_traj) -> float:
    """RMSE of camera positions after 7-DoF alignment of est onto gt."""
    if len(est_traj) != len(gt_traj):
        raise DataError(
            f"trajectory length mismatch: {len(est_traj)} vs {len(gt_traj)}"
        )
    p_est = _positions(est_traj)
    p_gt = _positions(gt_traj)
    scale, rot, t = umeyama_align(p_est, p_gt, with_scale=True)
    res = p_gt - (scale * (p_est @ rot.T) + t)
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def _aligned_c2w(traj, scale, rot, t):
    """Camera-to-world 4x4s of a w2c trajectory under a similarity.

    Rotations compose with R only; scale acts on the centers, matching the
    usual trajectory-evaluation treatment of the 7-DoF gauge.
    """
    out = []
    for p in traj:
        m = np.eye(4)
        m[:3, :3] = rot @ p.r.T
        m[:3, 3] = scale * (rot @ (-p.r.T @ p.t)) + t
        out.append(m)
    return out


def rpe(est_traj, gt_traj, step: int = 1):
    """Relative pose error: (translation RMSE, mean rotation angle in deg).

    Per index i, E_i = (gt_i^-1 gt_{i+step})^-1 (est_i^-1 est_{i+step}) on
    camera-to-world transforms, with the ATE alignment applied to est first.
    """
    if len(est_traj) != len(gt_traj):
        raise DataError(
            f"trajectory length mismatch: {len(est_traj)} vs {len(gt_traj)}"
        )
    n = len(est_traj)
    if not 1 <= step < n:
        raise DataError(f"rpe step must be in [1, {n - 1}], got {step}")
    scale, rot, t = umeyama_align(
        _positions(est_traj), _positions(gt_traj), with_scale=True
    )
    est_m = _aligned_c2w(est_traj, scale, rot, t)
    gt_m = _aligned_c2w(gt_traj, 1.0, np.eye(3), np.zeros(3))

    t_sq = []
    angles = []
    for i in range(n - step):
        d_gt = np.linalg.inv(gt_m[i]) @ gt_m[i + step]
        d_est = np.linalg.inv(est_m[i]) @ est_m[i + step]
        e = np.linalg.inv(d_gt) @ d_est
        t_sq.append(float(np.sum(e[:3, 3] ** 2)))
        r = e[:3, :3]
        cos = (np.trace(r) - 1.0) / 2.0
        # atan2 of the skew norm stays well conditioned near identity,
        # where acos(trace) loses half the significant digits
        sin = 0.5 * math.sqrt(
            (r[2, 1] - r[1, 2]) ** 2
            + (r[0, 2] - r[2, 0]) ** 2
            + (r[1, 0] - r[0, 1]) ** 2
        )
        angles.append(math.degrees(math.atan2(sin, cos)))
    return float(np.sqrt(np.mean(t_sq))), float(np.mean(angles))


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    delta: float

    def as_dict(self) -> dict:
        return {
            "abs_rel": self.abs_rel,
            "sq_rel": self.sq_rel,
            "rmse": self.rmse,
            "delta_1_25": self.delta,
        }


def depth_metrics(est_depths, gt_depths, masks) -> DepthMetrics:
    """Median-scaled depth errors, averaged per frame over the sequence.

    Per frame: scale = median(gt / est) over the valid mask, then
    AbsRel = mean |s est - gt| / gt, SqRel = mean (s est - gt)^2 / gt,
    RMSE = sqrt(mean (s est - gt)^2), delta = fraction with
    max(s est / gt, gt / (s est)) < 1.25. Frames whose valid mask is empty
    are excluded with a warning.
    """
    if not len(est_depths) == len(gt_depths) == len(masks):
        raise DataError(
            f"depth sequence length mismatch: {len(est_depths)} est, "
            f"{len(gt_depths)} gt, {len(masks)} masks"
        )
    rows = []
    for t, (est, gt, mask) in enumerate(zip(est_depths, gt_depths, masks)):
        valid = np.asarray(mask, dtype=bool)
        e = np.asarray(est, dtype=np.float64)[valid]
        g = np.asarray(gt, dtype=np.float64)[valid]
        if e.size == 0:
            warnings.warn(f"frame {t}: empty valid mask, excluded from depth metrics")
            continue
        if np.any(e <= 0) or np.any(g <= 0):
            raise DataError(f"frame {t}: non-positive depth on valid pixels")
        e = e * float(np.median(g / e))
        diff = e - g
        ratio = np.maximum(e / g, g / e)
        rows.append(
            (
                float(np.mean(np.abs(diff) / g)),
                float(np.mean(diff * diff / g)),
                float(np.sqrt(np.mean(diff * diff))),
                float(np.mean(ratio < 1.25)),
            )
        )
    if not rows:
        raise DataError("depth_metrics: every frame had an empty valid mask")
    means = np.mean(np.array(rows), axis=0)
    return DepthMetrics(*[float(v) for v in means])


def metrics_kv_text(metrics: dict) -> str:
    """Key-value lines, one metric per line, repr-precision floats."""
    return "".join(f"{k} {_fmt(v)}\n" for k, v in metrics.items())


def metrics_csv(metrics: dict) -> str:
    """Two comma-separated rows: header line and value line."""
    keys = list(metrics)
    return (
        ",".join(keys) + "\n" + ",".join(_fmt(metrics[k]) for k in keys) + "\n"
    )


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
