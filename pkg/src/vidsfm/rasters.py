"""Bit-exact raster container, trajectory text format, scene directory layout,
and prior normalization.

Raster container ("GCVDR1"): 6-byte magic, then width, height, channels as
u32 little-endian, then the row-major channel-interleaved float32
little-endian payload. Masks reuse the container with values {0.0, 1.0}.

Trajectory text: one line per frame, "timestamp tx ty tz qx qy qz qw",
quaternion scalar-last, camera-to-world, >= 9 significant digits.

Scene layout:
    scene/
      frames.meta                    key-value text (intrinsics, frame count)
      images/frame_%06d.gcvdr        grayscale in [0,1], 1 channel
      priors/depth_%06d.gcvdr        positive depth prior, arbitrary scale
      priors/flow_fwd_%06d.gcvdr     flow t -> t+1, indices 0..N-2
      priors/flow_bwd_%06d.gcvdr     flow t -> t-1, indices 1..N-1
      priors/mask_%06d.gcvdr         static mask, 1.0 = static
      priors/desc_%06d.gcvdr         unit descriptor, 256x1, optional
      pairflow/flow_%06d_%06d.gcvdr  on-demand pair flows, optional
      gt/depth_%06d.gcvdr            optional exact depths
      gt/trajectory.txt              optional exact camera-to-world poses
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import Intrinsics, Pose

MAGIC = b"GCVDR1"
_HEADER = struct.Struct("<III")
_MAX_ELEMENTS = 1 << 31  # caps w*h*c; keeps payload under 8 GiB

DESCRIPTOR_LENGTH = 256


def write_raster(arr: np.ndarray, path) -> None:
    """Write a (H, W) or (H, W, C) array as float32. Lossless for float32 input."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise DataError(f"raster must be 2D or 3D, got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1 or c < 1:
        raise DataError(f"degenerate raster shape {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(w, h, c))
        f.write(payload)
    os.replace(tmp, path)


def read_raster(path) -> np.ndarray:
    """Read a raster; returns (H, W) when single-channel, else (H, W, C)."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"cannot read raster {path}: {e}") from e
    w, h, c = _parse_header(data, path)
    expected = w * h * c * 4
    payload = data[len(MAGIC) + _HEADER.size :]
    if len(payload) < expected:
        raise DataError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    if len(payload) > expected:
        raise DataError(
            f"{path}: trailing bytes ({len(payload)} bytes, expected {expected})"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    if c == 1:
        return np.array(arr[..., 0])
    return np.array(arr)


def _parse_header(data: bytes, path) -> tuple[int, int, int]:
    if len(data) < len(MAGIC) + _HEADER.size:
        raise DataError(f"{path}: file too short for header")
    if data[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    w, h, c = _HEADER.unpack_from(data, len(MAGIC))
    if w == 0 or h == 0 or c == 0:
        raise DataError(f"{path}: zero dimension in header ({w}x{h}x{c})")
    if w * h * c > _MAX_ELEMENTS:
        raise DataError(f"{path}: dimension overflow ({w}x{h}x{c})")
    return w, h, c


def raster_header(path) -> tuple[int, int, int]:
    """Return (width, height, channels) without loading the payload."""
    with open(path, "rb") as f:
        data = f.read(len(MAGIC) + _HEADER.size)
    return _parse_header(data, path)


@dataclass
class NormalizedPrior:
    """Log prior depth, centered and scaled over static pixels."""

    n: np.ndarray  # (H, W) float64
    mu: float
    sigma: float


def normalize_log_prior(prior_depth: np.ndarray, static_mask: np.ndarray) -> NormalizedPrior:
    """n = (log D - mu) / sigma with mu, sigma over static pixels.

    Dynamic pixels are normalized with the same statistics. A constant prior
    has no structure to keep: n is identically zero and sigma is 1.
    """
    d = np.asarray(prior_depth, dtype=np.float64)
    m = np.asarray(static_mask, dtype=bool)
    if d.shape != m.shape:
        raise DataError("prior depth and mask shapes differ")
    if int(m.sum()) < 16:
        raise DataError("insufficient static support")
    if np.any(d <= 0):
        raise DataError("non-positive prior depth")
    log_d = np.log(d)
    mu = float(log_d[m].mean())
    sigma = float(log_d[m].std())
    if sigma < 1e-12:
        return NormalizedPrior(np.zeros_like(log_d), mu, 1.0)
    return NormalizedPrior((log_d - mu) / sigma, mu, sigma)


def write_trajectory(poses_c2w, timestamps, path) -> None:
    """Write camera-to-world poses in TUM text form.

    Quaternion scalar-last; every value carries 9 significant digits, which
    round-trips translations to ~1e-8 relative.
    """
    poses_c2w = list(poses_c2w)
    timestamps = list(timestamps)
    if len(poses_c2w) != len(timestamps):
        raise DataError("pose/timestamp count mismatch")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for ts, pose in zip(timestamps, poses_c2w):
        q = pose.q / np.linalg.norm(pose.q)
        vals = [pose.t[0], pose.t[1], pose.t[2], q[0], q[1], q[2], q[3]]
        lines.append("%.9f " % ts + " ".join("%.9g" % v for v in vals))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_trajectory(path):
    """Read a TUM trajectory; returns (poses list, timestamps array).

    Poses are camera-to-world, as stored.
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read trajectory {path}: {e}") from e
    poses, times = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise DataError(
                f"{path}: line {lineno}: expected 8 fields, got {len(fields)}"
            )
        try:
            vals = [float(f) for f in fields]
        except ValueError as e:
            raise DataError(f"{path}: line {lineno}: {e}") from e
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        q = np.array([qx, qy, qz, qw])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise DataError(
                f"{path}: line {lineno}: non-unit quaternion (norm {norm:.6f})"
            )
        poses.append(Pose(q, np.array([tx, ty, tz])))
        times.append(ts)
    return poses, np.asarray(times, dtype=np.float64)


def parse_kv_text(text: str) -> dict:
    """Flat key-value lines; '#' starts a comment; value is the line remainder."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise DataError(f"line {lineno}: expected 'key value', got {raw!r}")
        out[parts[0]] = parts[1].strip()
    return out


def format_kv_text(pairs) -> str:
    return "\n".join(f"{k} {v}" for k, v in pairs) + "\n"


@dataclass
class FramesMeta:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    n_frames: int

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @property
    def long_side(self) -> int:
        return max(self.width, self.height)


def write_frames_meta(meta: FramesMeta, path) -> None:
    pairs = [
        ("width", meta.width),
        ("height", meta.height),
        ("fx", repr(meta.fx)),
        ("fy", repr(meta.fy)),
        ("cx", repr(meta.cx)),
        ("cy", repr(meta.cy)),
        ("n_frames", meta.n_frames),
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_kv_text(pairs))


def read_frames_meta(path) -> FramesMeta:
    try:
        kv = parse_kv_text(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read frames.meta at {path}: {e}") from e
    try:
        meta = FramesMeta(
            width=int(kv["width"]),
            height=int(kv["height"]),
            fx=float(kv["fx"]),
            fy=float(kv["fy"]),
            cx=float(kv["cx"]),
            cy=float(kv["cy"]),
            n_frames=int(kv["n_frames"]),
        )
    except KeyError as e:
        raise DataError(f"{path}: missing key {e.args[0]}") from e
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    if meta.width < 1 or meta.height < 1 or meta.n_frames < 1:
        raise DataError(f"{path}: non-positive dimension or frame count")
    return meta


class ScenePaths:
    """Path arithmetic for the scene directory layout."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def meta(self) -> Path:
        return self.root / "frames.meta"

    @property
    def images_dir(self) -> Path:
        return self.root / "images"

    @property
    def priors_dir(self) -> Path:
        return self.root / "priors"

    @property
    def pairflow_dir(self) -> Path:
        return self.root / "pairflow"

    @property
    def gt_dir(self) -> Path:
        return self.root / "gt"

    def image(self, t: int) -> Path:
        return self.root / "images" / f"frame_{t:06d}.gcvdr"

    def prior_depth(self, t: int) -> Path:
        return self.root / "priors" / f"depth_{t:06d}.gcvdr"

    def flow_fwd(self, t: int) -> Path:
        return self.root / "priors" / f"flow_fwd_{t:06d}.gcvdr"

    def flow_bwd(self, t: int) -> Path:
        return self.root / "priors" / f"flow_bwd_{t:06d}.gcvdr"

    def mask(self, t: int) -> Path:
        return self.root / "priors" / f"mask_{t:06d}.gcvdr"

    def desc(self, t: int) -> Path:
        return self.root / "priors" / f"desc_{t:06d}.gcvdr"

    def pair_flow(self, i: int, j: int) -> Path:
        return self.root / "pairflow" / f"flow_{i:06d}_{j:06d}.gcvdr"

    def gt_depth(self, t: int) -> Path:
        return self.root / "gt" / f"depth_{t:06d}.gcvdr"

    @property
    def gt_trajectory(self) -> Path:
        return self.root / "gt" / "trajectory.txt"

    @property
    def has_gt(self) -> bool:
        return self.gt_trajectory.exists()


@dataclass
class Scene:
    """A scene directory loaded into memory."""

    paths: ScenePaths
    meta: FramesMeta
    images: list  # (H, W) float64 in [0, 1]
    prior_depths: list  # (H, W) float64 > 0
    masks: list  # (H, W) bool, True = static
    flow_fwd: list  # index t: flow t -> t+1; entry N-1 is None
    flow_bwd: list  # index t: flow t -> t-1; entry 0 is None
    descriptors: list | None  # (256,) unit vectors, or None if not stored
    gt_depths: list | None
    gt_poses: list | None  # world-to-camera Pose list

    @property
    def n_frames(self) -> int:
        return self.meta.n_frames

    @property
    def intrinsics(self) -> Intrinsics:
        return self.meta.intrinsics()


def load_scene(scene_dir, with_gt: bool = True) -> Scene:
    sp = ScenePaths(scene_dir)
    if not sp.meta.exists():
        raise DataError(f"no frames.meta in {scene_dir}")
    meta = read_frames_meta(sp.meta)
    n = meta.n_frames
    hw = (meta.height, meta.width)

    def load_checked(path, channels, name):
        arr = read_raster(path)
        shape = arr.shape[:2]
        got_c = 1 if arr.ndim == 2 else arr.shape[2]
        if shape != hw or got_c != channels:
            raise DataError(
                f"{path}: {name} shape {arr.shape} does not match meta {hw} x{channels}"
            )
        return np.asarray(arr, dtype=np.float64)

    images = [load_checked(sp.image(t), 1, "image") for t in range(n)]
    prior_depths = [load_checked(sp.prior_depth(t), 1, "prior depth") for t in range(n)]
    masks = [load_checked(sp.mask(t), 1, "mask") > 0.5 for t in range(n)]
    flow_fwd = [load_checked(sp.flow_fwd(t), 2, "flow") for t in range(n - 1)] + [None]
    flow_bwd = [None] + [load_checked(sp.flow_bwd(t), 2, "flow") for t in range(1, n)]

    descriptors = None
    if all(sp.desc(t).exists() for t in range(n)):
        descriptors = []
        for t in range(n):
            d = np.asarray(read_raster(sp.desc(t)), dtype=np.float64).reshape(-1)
            descriptors.append(d)

    gt_depths = gt_poses = None
    if with_gt and sp.has_gt:
        poses_c2w, _ = read_trajectory(sp.gt_trajectory)
        if len(poses_c2w) != n:
            raise DataError(
                f"gt trajectory has {len(poses_c2w)} poses for {n} frames"
            )
        gt_poses = [p.inverse() for p in poses_c2w]
        gt_depths = [load_checked(sp.gt_depth(t), 1, "gt depth") for t in range(n)]

    return Scene(
        paths=sp,
        meta=meta,
        images=images,
        prior_depths=prior_depths,
        masks=masks,
        flow_fwd=flow_fwd,
        flow_bwd=flow_bwd,
        descriptors=descriptors,
        gt_depths=gt_depths,
        gt_poses=gt_poses,
    )


def validate_scene(scene_dir) -> list:
    """Check a scene directory against the format contracts.

    Returns a list of problem strings; empty means the scene validates.
    """
    problems = []
    sp = ScenePaths(scene_dir)
    if not sp.meta.exists():
        return [f"missing frames.meta in {scene_dir}"]
    try:
        meta = read_frames_meta(sp.meta)
    except DataError as e:
        return [str(e)]
    n = meta.n_frames
    hw = (meta.height, meta.width)

    def check_raster(path, channels, name, checker=None):
        if not path.exists():
            problems.append(f"missing {name}: {path.name}")
            return
        try:
            arr = read_raster(path)
        except DataError as e:
            problems.append(str(e))
            return
        got_c = 1 if arr.ndim == 2 else arr.shape[2]
        if arr.shape[:2] != hw or got_c != channels:
            problems.append(
                f"{path.name}: shape {arr.shape} does not match {hw} x{channels}"
            )
            return
        if not np.all(np.isfinite(arr)):
            problems.append(f"{path.name}: non-finite values")
            return
        if checker is not None:
            msg = checker(arr)
            if msg:
                problems.append(f"{path.name}: {msg}")

    def image_ok(a):
        if a.min() < 0.0 or a.max() > 1.0:
            return f"values outside [0,1] (min {a.min():.4g}, max {a.max():.4g})"

    def depth_ok(a):
        if a.min() <= 0.0:
            return f"non-positive depth (min {a.min():.4g})"

    def mask_ok(a):
        if not np.all((a == 0.0) | (a == 1.0)):
            return "mask values other than {0.0, 1.0}"

    for t in range(n):
        check_raster(sp.image(t), 1, "image", image_ok)
        check_raster(sp.prior_depth(t), 1, "prior depth", depth_ok)
        check_raster(sp.mask(t), 1, "mask", mask_ok)
    for t in range(n - 1):
        check_raster(sp.flow_fwd(t), 2, "forward flow")
    for t in range(1, n):
        check_raster(sp.flow_bwd(t), 2, "backward flow")
    if sp.flow_fwd(n - 1).exists():
        problems.append(f"unexpected forward flow for last frame {n - 1}")
    if n > 0 and sp.flow_bwd(0).exists():
        problems.append(f"unexpected backward flow for frame 0")

    desc_present = [sp.desc(t).exists() for t in range(n)]
    if any(desc_present):
        if not all(desc_present):
            problems.append("descriptors present for some frames but not all")
        for t in range(n):
            if not desc_present[t]:
                continue
            try:
                d = np.asarray(read_raster(sp.desc(t))).reshape(-1)
            except DataError as e:
                problems.append(str(e))
                continue
            if d.size != DESCRIPTOR_LENGTH:
                problems.append(
                    f"desc_{t:06d}: length {d.size}, expected {DESCRIPTOR_LENGTH}"
                )
            elif abs(float(np.linalg.norm(d)) - 1.0) > 1e-5:
                problems.append(
                    f"desc_{t:06d}: norm {np.linalg.norm(d):.6f} not unit"
                )

    if sp.has_gt:
        try:
            poses, _ = read_trajectory(sp.gt_trajectory)
            if len(poses) != n:
                problems.append(
                    f"gt trajectory has {len(poses)} poses for {n} frames"
                )
        except DataError as e:
            problems.append(str(e))
        for t in range(n):
            check_raster(sp.gt_depth(t), 1, "gt depth", depth_ok)
    return problems


def directory_digest(root) -> str:
    """SHA-256 over every regular file under root, keyed by relative path.

    Path ordering is lexicographic so the digest is reproducible across
    filesystems; file contents are hashed byte for byte.
    """
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        h.update(rel.encode("utf-8"))
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()
