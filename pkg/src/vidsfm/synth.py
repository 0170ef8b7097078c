"""Synthetic scene generator with exact geometric ground truth.

The world is a single textured relief surface z = Z0 + A*g(x, y) observed by
a smooth camera path. Per-pixel depth is the exact ray/surface intersection
(vectorized Newton), flows are exact reprojections of the cast points
(optionally perturbed by a seeded smooth field to mimic estimator error),
and prior depths are the ground truth deformed by a controlled
multiplicative bias field plus log-normal noise. An optional textured disk slides across
the surface to create photometrically dynamic pixels with known masks, while
the geometry underneath stays rigid. Because every quantity is computable in
closed form, generated scenes double as a brute-force oracle for the
geometric code paths downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .geometry import (
    Intrinsics,
    Pose,
    pixel_grid,
    project,
    rigid_flow,
    se3_exp,
    warp_bilinear,
)
from .keyframing import descriptor
from .rasters import (
    FramesMeta,
    Scene,
    ScenePaths,
    format_kv_text,
    load_scene,
    parse_kv_text,
    write_frames_meta,
    write_raster,
    write_trajectory,
)

_TRAJ_STYLES = ("loop", "forward", "spline")

# Relative frequencies and normalized weights of the three relief waves.
# sum(weights) == 1 so |g| <= 1 and the surface stays inside Z0 +/- A.
_SURF_RATIOS = np.array([1.0, 1.7, 2.9])
_SURF_WEIGHTS = np.array([1.0, 0.4, 0.15]) / 1.55

# Texture octaves: world frequency doubles per octave while amplitude falls
# fast enough that bilinear resampling of a rendered view stays below the
# 5e-3 photometric-consistency budget (worst case amp*(2*pi*f_px)^2/8 per
# octave, f_px evaluated at the far side of the relief with slant margin).
_TEX_BASE_FREQ = 0.9
_TEX_AMPS = np.array([0.14, 0.018, 0.002])
_TEX_WAVES_PER_OCTAVE = 2

_RAY_TOL = 1e-9
_RAY_ITERS = 64

# Stored-flow perturbation: a few plane waves per component, frequencies in
# cycles per image span. Kept above 1 so the affine projection in
# _smooth_flow_field removes little of the signal.
_FLOW_NOISE_WAVES = 3
_FLOW_NOISE_FREQ = (1.5, 3.5)


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a generated scene. Everything is seeded and reproducible."""

    seed: int = 0
    n_frames: int = 60
    width: int = 96
    height: int = 72
    traj_style: str = "loop"
    traj_scale: float = 0.8
    rot_amp: float = 0.02
    base_depth: float = 4.0
    amplitude: float = 0.6
    surface_freq: float = 0.07
    texture_contrast: float = 1.0
    prior_scale: float = 1.0
    prior_bias: float = 0.0
    prior_noise: float = 0.0
    flow_noise: float = 0.0
    dynamic_radius: float = 0.0
    dynamic_vel_x: float = 0.012
    dynamic_vel_y: float = 0.005
    write_descriptors: bool = True

    def validate(self) -> None:
        if self.n_frames < 2:
            raise ConfigError(f"n_frames must be >= 2, got {self.n_frames}")
        if self.width < 16 or self.height < 16:
            raise ConfigError(
                f"frame size must be at least 16x16, got {self.width}x{self.height}"
            )
        if self.traj_style not in _TRAJ_STYLES:
            raise ConfigError(
                f"traj_style must be one of {_TRAJ_STYLES}, got {self.traj_style!r}"
            )
        if self.traj_scale <= 0:
            raise ConfigError("degenerate trajectory: traj_scale must be positive")
        if self.base_depth <= 0:
            raise ConfigError("base_depth must be positive")
        if not 0 <= self.amplitude < self.base_depth:
            raise ConfigError("amplitude must satisfy 0 <= amplitude < base_depth")
        if self.surface_freq <= 0:
            raise ConfigError("surface_freq must be positive")
        if not 0 < self.texture_contrast <= 3:
            raise ConfigError("texture_contrast must lie in (0, 3]")
        if self.prior_scale <= 0:
            raise ConfigError("prior_scale must be positive")
        if not 0 <= self.prior_bias <= 0.9:
            raise ConfigError("prior_bias must lie in [0, 0.9]")
        if not 0 <= self.prior_noise <= 0.5:
            raise ConfigError("prior_noise must lie in [0, 0.5]")
        if not 0 <= self.flow_noise <= 5:
            raise ConfigError("flow_noise must lie in [0, 5] pixels")
        if self.dynamic_radius < 0:
            raise ConfigError("dynamic_radius must be non-negative")
        if not 0 <= self.rot_amp <= 0.2:
            raise ConfigError("rot_amp must lie in [0, 0.2]")
        # Ray casting needs the surface to stay single-valued along every
        # viewing ray: bound the worst-case slope well below 45 degrees.
        slope = (
            self.amplitude
            * 2.0
            * math.pi
            * self.surface_freq
            * float(np.sum(_SURF_WEIGHTS * _SURF_RATIOS))
        )
        if slope > 0.75:
            raise ConfigError(
                f"surface too steep for single-valued ray casting (slope {slope:.3f})"
            )
        if self.traj_style == "forward":
            clearance = self.base_depth - self.amplitude - self.traj_scale
            if clearance < 0.5:
                raise ConfigError(
                    "forward trajectory drives the camera too close to the surface"
                )


_SPEC_FIELDS = {f: t for f, t in SceneSpec.__annotations__.items()}


def spec_from_kv(mapping: dict) -> SceneSpec:
    """Build a SceneSpec from string key/value pairs, rejecting unknown keys."""
    kwargs = {}
    for key, raw in mapping.items():
        if key not in _SPEC_FIELDS:
            raise ConfigError(f"unknown scene key: {key}")
        ann = _SPEC_FIELDS[key]
        try:
            if ann == "int":
                kwargs[key] = int(raw)
            elif ann == "float":
                kwargs[key] = float(raw)
            elif ann == "bool":
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes")
            else:
                kwargs[key] = str(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw!r}") from e
    spec = SceneSpec(**kwargs)
    spec.validate()
    return spec


def load_spec(path) -> SceneSpec:
    try:
        text = open(path, "r", encoding="utf-8").read()
    except OSError as e:
        raise ConfigError(f"cannot read scene spec {path}: {e}") from e
    try:
        pairs = parse_kv_text(text)
    except DataError as e:
        raise ConfigError(str(e)) from e
    return spec_from_kv(pairs)


def spec_to_text(spec: SceneSpec) -> str:
    pairs = []
    for name in _SPEC_FIELDS:
        v = getattr(spec, name)
        pairs.append((name, repr(v) if isinstance(v, float) else v))
    return format_kv_text(pairs)


class _CosField:
    """Sum of 2D plane-wave cosines with analytic gradient."""

    def __init__(self, dirs, freqs, amps, phases):
        self.dirs = np.asarray(dirs, dtype=np.float64)
        self.freqs = np.asarray(freqs, dtype=np.float64)
        self.amps = np.asarray(amps, dtype=np.float64)
        self.phases = np.asarray(phases, dtype=np.float64)

    def _args(self, x, y):
        # (..., n_waves) phase arguments
        proj = (
            x[..., None] * self.dirs[:, 0] + y[..., None] * self.dirs[:, 1]
        )
        return 2.0 * math.pi * self.freqs * proj + self.phases

    def value(self, x, y):
        return np.sum(self.amps * np.cos(self._args(x, y)), axis=-1)

    def grad(self, x, y):
        s = self.amps * 2.0 * math.pi * self.freqs * np.sin(self._args(x, y))
        gx = -np.sum(s * self.dirs[:, 0], axis=-1)
        gy = -np.sum(s * self.dirs[:, 1], axis=-1)
        return gx, gy


def _rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Camera-to-world rotation: yaw about y, pitch about x, roll about z."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


def _trajectory(spec: SceneSpec, rng: np.random.Generator):
    """Camera centers and orientations; returns world-to-camera poses."""
    n = spec.n_frames
    s = np.arange(n, dtype=np.float64) / (n - 1)
    r = spec.traj_scale
    w = spec.rot_amp
    if spec.traj_style == "loop":
        th = 2.0 * math.pi * s
        cx = r * np.sin(th)
        cy = 0.45 * r * (1.0 - np.cos(th))
        cz = 0.15 * r * np.sin(2.0 * th)
        yaw = w * np.sin(th)
        pitch = 0.6 * w * np.sin(2.0 * th)
        roll = 0.3 * w * (np.cos(th) - 1.0)
    elif spec.traj_style == "forward":
        th = 2.0 * math.pi * s
        cx = 0.1 * r * np.sin(th)
        cy = 0.05 * r * (1.0 - np.cos(th))
        cz = r * s
        yaw = w * np.sin(th)
        pitch = 0.5 * w * np.sin(2.0 * th)
        roll = np.zeros(n)
    else:  # spline: seeded low-order Fourier path, pinned to the origin at s=0
        cx = np.zeros(n)
        cy = np.zeros(n)
        cz = np.zeros(n)
        comps = [cx, cy, cz]
        for axis in range(3):
            for k in range(1, 4):
                a = rng.uniform(-1.0, 1.0) * r / k**2
                phase = rng.uniform(0.0, 2.0 * math.pi)
                comps[axis] += a * (np.sin(math.pi * k * s + phase) - math.sin(phase))
        cz *= 0.3  # keep depth range comfortable
        angles = []
        for _ in range(3):
            a1 = rng.uniform(-1.0, 1.0) * w
            p1 = rng.uniform(0.0, 2.0 * math.pi)
            angles.append(a1 * (np.sin(math.pi * s + p1) - np.sin(p1)))
        yaw, pitch, roll = angles
    centers = np.stack([cx, cy, cz], axis=-1)
    extent = float(np.linalg.norm(np.ptp(centers, axis=0)))
    if extent <= 1e-12:
        raise ConfigError("degenerate trajectory: zero spatial extent")
    poses = []
    for t in range(n):
        r_cw = _rotation(float(yaw[t]), float(pitch[t]), float(roll[t]))
        r_wc = r_cw.T
        poses.append(Pose.from_rt(r_wc, -r_wc @ centers[t]))
    return poses, centers


def _cast_rays(center, r_cw, k: Intrinsics, surf: _CosField, z0: float, amp: float):
    """Intersect every pixel ray with z = z0 + amp*g(x, y).

    Directions are normalized to unit camera-z, so the ray parameter IS the
    camera-frame depth. Newton iteration; the slope guard in validate()
    makes f monotone in s along every ray.
    """
    grid = pixel_grid(k.height, k.width)
    dirs_cam = np.empty((k.height, k.width, 3))
    dirs_cam[..., 0] = (grid[..., 0] - k.cx) / k.fx
    dirs_cam[..., 1] = (grid[..., 1] - k.cy) / k.fy
    dirs_cam[..., 2] = 1.0
    d_w = dirs_cam @ r_cw.T
    dz = d_w[..., 2]
    if np.any(dz <= 0.05):
        raise ConfigError("camera ray nearly parallel to the surface")
    s = (z0 - center[2]) / dz
    for _ in range(_RAY_ITERS):
        x = center[0] + s * d_w[..., 0]
        y = center[1] + s * d_w[..., 1]
        z = center[2] + s * dz
        f = z - z0 - amp * surf.value(x, y)
        gx, gy = surf.grad(x, y)
        fp = dz - amp * (gx * d_w[..., 0] + gy * d_w[..., 1])
        step = f / fp
        s = s - step
        if float(np.max(np.abs(step))) < 1e-13:
            break
    x = center[0] + s * d_w[..., 0]
    y = center[1] + s * d_w[..., 1]
    z = center[2] + s * dz
    resid = np.abs(z - z0 - amp * surf.value(x, y))
    if float(np.max(resid)) > _RAY_TOL:
        raise NumericalError(
            f"ray casting did not converge (residual {float(np.max(resid)):.3e})"
        )
    points = np.stack([x, y, z], axis=-1)
    return s, points


def _flow_between(points_w, pose_dst: Pose, k: Intrinsics, grid):
    xc = points_w @ pose_dst.r.T + pose_dst.t
    if np.any(xc[..., 2] <= 1e-6):
        raise NumericalError("surface point behind destination camera")
    return project(xc, k) - grid


def _smooth_flow_field(rng, uu, vv):
    """Smooth unit-RMS vector field with the affine part projected out.

    Camera motion shows up in flow mostly through the constant and linear
    modes, so removing mean and tilt per component keeps the perturbation
    out of the odometry's lane and concentrates it on local structure.
    """
    comps = []
    for _ in range(2):
        ang = rng.uniform(0, 2 * math.pi, _FLOW_NOISE_WAVES)
        freq = rng.uniform(*_FLOW_NOISE_FREQ, _FLOW_NOISE_WAVES)
        phase = rng.uniform(0, 2 * math.pi, _FLOW_NOISE_WAVES)
        amp = rng.uniform(0.5, 1.0, _FLOW_NOISE_WAVES)
        arg = (
            2.0 * math.pi * freq
            * (np.cos(ang) * uu[..., None] + np.sin(ang) * vv[..., None])
            + phase
        )
        comps.append(np.sum(amp * np.cos(arg), axis=-1))
    field = np.stack(comps, axis=-1)
    # uc and vc are separable over the grid, so they are orthogonal to each
    # other and to the constant mode; three sequential projections suffice.
    uc = uu - uu.mean()
    vc = vv - vv.mean()
    for c in range(2):
        f = field[..., c]
        f = f - f.mean()
        f = f - (np.sum(f * uc) / np.sum(uc * uc)) * uc
        f = f - (np.sum(f * vc) / np.sum(vc * vc)) * vc
        field[..., c] = f
    rms = math.sqrt(float(np.mean(np.sum(field**2, axis=-1))))
    return field / rms


def generate(spec: SceneSpec, out_dir) -> Scene:
    """Render a scene directory (frames.meta, priors, flows, gt) and load it back."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    # All scene-level draws happen here, in fixed order, so the layout of
    # randomness is stable for a given spec.
    surf_angles = rng.uniform(0, 2 * math.pi, 3)
    surf = _CosField(
        dirs=np.stack([np.cos(surf_angles), np.sin(surf_angles)], axis=-1),
        freqs=spec.surface_freq * _SURF_RATIOS,
        amps=_SURF_WEIGHTS,
        phases=rng.uniform(0, 2 * math.pi, 3),
    )
    n_tex = len(_TEX_AMPS) * _TEX_WAVES_PER_OCTAVE
    tex_angles = rng.uniform(0, 2 * math.pi, n_tex)
    tex = _CosField(
        dirs=np.stack([np.cos(tex_angles), np.sin(tex_angles)], axis=-1),
        freqs=np.repeat(
            _TEX_BASE_FREQ * 2.0 ** np.arange(len(_TEX_AMPS)), _TEX_WAVES_PER_OCTAVE
        ),
        amps=np.repeat(
            spec.texture_contrast * _TEX_AMPS / _TEX_WAVES_PER_OCTAVE,
            _TEX_WAVES_PER_OCTAVE,
        ),
        phases=rng.uniform(0, 2 * math.pi, n_tex),
    )
    bias_phase = rng.uniform(0, 2 * math.pi)
    dyn_center0 = np.array([0.25, 0.1]) + rng.uniform(-0.05, 0.05, 2)
    poses, centers = _trajectory(spec, rng)

    n = spec.n_frames
    w, h = spec.width, spec.height
    focal = float(max(w, h))
    k = Intrinsics(
        fx=focal, fy=focal, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h
    )
    grid = pixel_grid(h, w)
    uu = grid[..., 0] / (w - 1)
    vv = grid[..., 1] / (h - 1)

    sp = ScenePaths(out_dir)
    for d in (sp.root, sp.images_dir, sp.priors_dir, sp.pairflow_dir, sp.gt_dir):
        d.mkdir(parents=True, exist_ok=True)

    meta = FramesMeta(
        width=w, height=h, fx=k.fx, fy=k.fy, cx=k.cx, cy=k.cy, n_frames=n
    )
    write_frames_meta(meta, sp.meta)

    all_points = []
    for t in range(n):
        depth, points = _cast_rays(
            centers[t], poses[t].r.T, k, surf, spec.base_depth, spec.amplitude
        )
        all_points.append(points)
        px, py = points[..., 0], points[..., 1]

        if spec.dynamic_radius > 0:
            c = dyn_center0 + t * np.array([spec.dynamic_vel_x, spec.dynamic_vel_y])
            dyn = (px - c[0]) ** 2 + (py - c[1]) ** 2 < spec.dynamic_radius**2
        else:
            dyn = np.zeros((h, w), dtype=bool)
        image = 0.5 + tex.value(px, py)
        if np.any(dyn):
            # The disk carries its own texture that rides along with it, so
            # its pixels are photometrically inconsistent across frames even
            # though the geometry underneath stays rigid.
            moving = 0.5 + tex.value(
                px - spec.dynamic_vel_x * t - 0.41,
                py - spec.dynamic_vel_y * t - 0.19,
            )
            image = np.where(dyn, moving, image)
        mask = (~dyn).astype(np.float64)

        # The bias field drifts slowly across frames (0.15 rad per frame);
        # nearby frames then share nearly the same bias, which is the regime
        # a coarse correction mesh interpolated between keyframes can track.
        bias = 1.0 + spec.prior_bias * np.cos(
            2.0 * math.pi * (0.8 * uu + 0.5 * vv) + bias_phase + 0.15 * t
        )
        prior = depth * spec.prior_scale * bias
        if spec.prior_noise > 0:
            noise_rng = np.random.default_rng((spec.seed, 2718, t))
            prior = prior * np.exp(spec.prior_noise * noise_rng.standard_normal((h, w)))

        write_raster(image.astype(np.float32), sp.image(t))
        write_raster(prior.astype(np.float32), sp.prior_depth(t))
        write_raster(mask.astype(np.float32), sp.mask(t))
        write_raster(depth.astype(np.float32), sp.gt_depth(t))
        if spec.write_descriptors:
            d = descriptor(image).astype(np.float32)
            write_raster(d.reshape(1, -1), sp.desc(t))

    # flow_noise perturbs only the stored rasters; ground truth and priors
    # stay exact, so evaluation still measures against the true geometry.
    def stored_flow(flow, t, direction):
        if spec.flow_noise > 0:
            nrng = np.random.default_rng((spec.seed, 9042, t, direction))
            flow = flow + spec.flow_noise * _smooth_flow_field(nrng, uu, vv)
        return flow.astype(np.float32)

    for t in range(n - 1):
        flow_fwd = _flow_between(all_points[t], poses[t + 1], k, grid)
        write_raster(stored_flow(flow_fwd, t, 0), sp.flow_fwd(t))
    for t in range(1, n):
        flow_bwd = _flow_between(all_points[t], poses[t - 1], k, grid)
        write_raster(stored_flow(flow_bwd, t, 1), sp.flow_bwd(t))

    write_trajectory(
        [p.inverse() for p in poses], [float(t) for t in range(n)], sp.gt_trajectory
    )
    return load_scene(sp.root)


def noisy_pose_loop(
    n: int,
    seed: int,
    rot_sigma_deg: float = 0.5,
    trans_frac: float = 0.01,
    tau_set=(1, 2, 4, 8),
):
    """Odometry-style pose-graph fixture on a closed loop.

    Ground-truth cameras sit on a circle looking inward. Every sequential
    offset in tau_set and three loop-closure pairs get a relative-pose
    measurement perturbed by rotation noise (total angle sigma in degrees)
    and translation noise (fraction of the per-frame odometry step length,
    uniform across edges). Initial poses dead-reckon the tau=1 measurements
    from the anchored start, so they drift; the closures carry the signal
    that pulls the loop shut.

    Returns (gt_poses, keyframes, accepted_pairs, initial_poses, measured).
    """
    if n < 8:
        raise ConfigError(f"loop fixture needs at least 8 poses, got {n}")
    rng = np.random.default_rng(seed)
    gt = []
    for p in range(n):
        th = 2.0 * math.pi * p / n
        center = np.array([math.cos(th), math.sin(th), 0.1 * math.sin(2 * th)])
        r_cw = _rotation(yaw=th, pitch=0.05 * math.sin(th), roll=0.0)
        r_wc = r_cw.T
        gt.append(Pose.from_rt(r_wc, -r_wc @ center))

    keyframes = list(range(n))
    pairs = []
    for a, b in (
        (0, n // 2),
        (n // 4, 3 * n // 4),
        (n // 8, 5 * n // 8),
    ):
        pairs.append((min(a, b), max(a, b)))

    step_norms = [
        float(np.linalg.norm((gt[p + 1] @ gt[p].inverse()).t)) for p in range(n - 1)
    ]
    mean_step = float(np.mean(step_norms))

    def noisy(z_true: Pose) -> Pose:
        angle = math.radians(rot_sigma_deg) * rng.standard_normal()
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        xi = np.concatenate(
            [rng.standard_normal(3) * trans_frac * mean_step, angle * axis]
        )
        return se3_exp(xi) @ z_true

    measured = {}
    edges = []
    for tau in tau_set:
        for p in range(n - tau):
            edges.append((p, p + tau))
    edges.extend(pairs)
    for i, j in edges:
        measured[(i, j)] = noisy(gt[j] @ gt[i].inverse())

    initial = [gt[0]]
    for p in range(n - 1):
        initial.append(measured[(p, p + 1)] @ initial[p])
    return gt, keyframes, pairs, initial, measured


@dataclass(frozen=True)
class PairCheck:
    """Photometric-consistency report for one ordered frame pair."""

    n_valid: int
    max_residual: float
    mean_residual: float


def render_pair_consistency_check(scene: Scene, a: int, b: int) -> PairCheck:
    """Warp frame b into frame a through the ground-truth geometry.

    Residuals are measured over pixels that land inside frame b and are
    static in both views. An empty pixel set is reported, not an error.
    """
    if scene.gt_depths is None or scene.gt_poses is None:
        raise DataError("scene has no ground truth")
    n = scene.meta.n_frames
    if not (0 <= a < n and 0 <= b < n):
        raise DataError(f"frame pair ({a}, {b}) out of range for {n} frames")
    k = scene.meta.intrinsics()
    flow, valid = rigid_flow(
        np.asarray(scene.gt_depths[a], dtype=np.float64),
        scene.gt_poses[a],
        scene.gt_poses[b],
        k,
    )
    warped_img, in_b = warp_bilinear(scene.images[b][..., None], flow)
    warped_mask, _ = warp_bilinear(
        scene.masks[b].astype(np.float64)[..., None], flow
    )
    keep = (
        valid
        & in_b
        & (scene.masks[a] > 0.5)
        & (warped_mask[..., 0] >= 0.999)
    )
    n_valid = int(np.count_nonzero(keep))
    if n_valid == 0:
        return PairCheck(n_valid=0, max_residual=0.0, mean_residual=0.0)
    resid = np.abs(warped_img[..., 0] - scene.images[a])[keep]
    return PairCheck(
        n_valid=n_valid,
        max_residual=float(np.max(resid)),
        mean_residual=float(np.mean(resid)),
    )
