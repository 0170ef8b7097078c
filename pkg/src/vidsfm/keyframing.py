"""Flow-accumulation keyframe selection and descriptor-based association.

Keyframes: frame 0 always; a frame becomes a keyframe when the running sum of
mean static flow magnitudes (normalized by the long image side) since the last
keyframe reaches the movement threshold; the final frame is always appended.

Association: cosine similarity of per-frame descriptors, thresholded and
non-maximum-suppressed over a 3x3 neighborhood, then geometrically verified by
forward-backward flow consistency and the movement threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import Intrinsics, rigid_flow, warp_bilinear
from .imageops import area_resize
from .rasters import DESCRIPTOR_LENGTH, ScenePaths, read_raster

THUMB_SIDE = 16


def mean_static_flow_magnitude(flow: np.ndarray, mask: np.ndarray, long_side: int) -> float:
    """Mean L2 flow magnitude over static pixels, in long-side units."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("no static pixels")
    mags = np.linalg.norm(np.asarray(flow, dtype=np.float64)[mask], axis=-1)
    return float(mags.mean() / long_side)


@dataclass
class KeyframeSet:
    indices: list  # strictly increasing frame indices, starts at 0
    step_magnitudes: np.ndarray  # N-1 per-adjacent-pair magnitudes
    trace: np.ndarray  # accumulator value at each frame after the decision

    def __post_init__(self):
        idx = list(self.indices)
        if not idx or idx[0] != 0 or any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("keyframe indices must be strictly increasing from 0")

    def __len__(self):
        return len(self.indices)


def select_keyframes(step_magnitudes, delta: float) -> KeyframeSet:
    """Accumulate per-step magnitudes; emit a keyframe when the sum reaches
    delta and reset. First and last frames are always keyframes."""
    mags = np.asarray(step_magnitudes, dtype=np.float64)
    n = mags.size + 1
    indices = [0]
    trace = np.zeros(n)
    acc = 0.0
    for t in range(1, n):
        acc += mags[t - 1]
        if acc >= delta:
            indices.append(t)
            acc = 0.0
        trace[t] = acc
    if indices[-1] != n - 1:
        indices.append(n - 1)
    return KeyframeSet(indices=indices, step_magnitudes=mags, trace=trace)


def descriptor(image: np.ndarray) -> np.ndarray:
    """16x16 area-averaged thumbnail, centered and L2-normalized.

    Zero-variance images map to e_1 so every descriptor has unit norm.
    """
    thumb = area_resize(np.asarray(image, dtype=np.float64), THUMB_SIDE, THUMB_SIDE)
    v = thumb.reshape(-1)
    v = v - v.mean()
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        e1 = np.zeros(DESCRIPTOR_LENGTH)
        e1[0] = 1.0
        return e1
    return v / norm


def similarity_matrix(descriptors) -> np.ndarray:
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError("descriptors must be a (k, L) array")
    return d @ d.T


def associate_candidates(a: np.ndarray, delta: float, alpha: int) -> list:
    """Candidate pairs (i, j), j - i > alpha, with similarity >= delta that are
    3x3 non-maximum-suppressed over admissible entries; ties go to the
    lexicographically smallest pair. Symmetrized first, so the output does not
    depend on which triangle of A carries the values."""
    a = np.asarray(a, dtype=np.float64)
    k = a.shape[0]
    if a.shape != (k, k):
        raise ValueError("similarity matrix must be square")
    a = 0.5 * (a + a.T)
    admissible = np.zeros((k, k), dtype=bool)
    for i in range(k):
        for j in range(i + alpha + 1, k):
            admissible[i, j] = a[i, j] >= delta
    out = []
    for i in range(k):
        for j in range(i + alpha + 1, k):
            if not admissible[i, j]:
                continue
            keep = True
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == 0 and dj == 0:
                        continue
                    p, q = i + di, j + dj
                    if not (0 <= p < k and 0 <= q < k and admissible[p, q]):
                        continue
                    if a[p, q] > a[i, j] or (a[p, q] == a[i, j] and (p, q) < (i, j)):
                        keep = False
                        break
                if not keep:
                    break
            if keep:
                out.append((i, j))
    return out


@dataclass
class VerifyResult:
    accepted: bool
    inlier_ratio: float
    mean_flow: float
    reason: str = ""


def fb_inlier_ratio(flow_ij, flow_ji, mask_i, eps_fb: float) -> float:
    """Fraction of source static pixels whose forward-backward composition
    returns within eps_fb px. Pixels leaving the image count as outliers."""
    mask_i = np.asarray(mask_i, dtype=bool)
    if not mask_i.any():
        raise DataError("no static pixels")
    back, valid = warp_bilinear(np.asarray(flow_ji, dtype=np.float64), flow_ij)
    err = np.linalg.norm(np.asarray(flow_ij) + back, axis=-1)
    inlier = valid & (err <= eps_fb)
    return float((inlier & mask_i).sum() / mask_i.sum())


def verify_pair(
    flow_ij,
    flow_ji,
    mask_i,
    delta: float,
    long_side: int,
    rho: float = 0.5,
    eps_fb: float | None = None,
) -> VerifyResult:
    """Geometric verification: fb-inlier ratio >= rho and mean static flow
    magnitude <= delta."""
    if eps_fb is None:
        eps_fb = max(1.0, 0.01 * long_side)
    ratio = fb_inlier_ratio(flow_ij, flow_ji, mask_i, eps_fb)
    mean_flow = mean_static_flow_magnitude(flow_ij, mask_i, long_side)
    if ratio < rho:
        return VerifyResult(False, ratio, mean_flow, "fb-inlier ratio below rho")
    if mean_flow > delta:
        return VerifyResult(False, ratio, mean_flow, "mean flow above delta")
    return VerifyResult(True, ratio, mean_flow)


class ExactFlowProvider:
    """Pair flows computed from ground-truth depths and poses."""

    def __init__(self, gt_depths, gt_poses, k: Intrinsics):
        self.depths = gt_depths
        self.poses = gt_poses
        self.k = k

    def has(self, i: int, j: int) -> bool:
        n = len(self.depths)
        return 0 <= i < n and 0 <= j < n

    def get(self, i: int, j: int) -> np.ndarray:
        if not self.has(i, j):
            raise DataError(f"flow provider miss for pair ({i}, {j})")
        flow, _ = rigid_flow(self.depths[i], self.poses[i], self.poses[j], self.k)
        return flow


class FileFlowProvider:
    """Pair flows from precomputed pairflow/flow_%06d_%06d.gcvdr files."""

    def __init__(self, paths: ScenePaths):
        self.paths = paths

    def has(self, i: int, j: int) -> bool:
        return self.paths.pair_flow(i, j).exists()

    def get(self, i: int, j: int) -> np.ndarray:
        path = self.paths.pair_flow(i, j)
        if not path.exists():
            raise DataError(f"flow provider miss for pair ({i}, {j})")
        return np.asarray(read_raster(path), dtype=np.float64)
