"""Optimization state: per-frame depth/pose parameters and window stacks.

A frame's persistent state is four numbers sets: the log-depth offset a,
the prior-structure gain b, a coarse mesh of log-depth corrections, and
the camera pose. Depth at any working resolution reconstructs as

    D = exp(a + b * n + upsample(mesh)),

where n is the log prior depth normalized once at full resolution (so a
and b keep their meaning across scales; initializing a = mu, b = sigma,
mesh = 0 reproduces the prior exactly at full resolution and its
blockwise geometric mean at reduced ones).

`WindowState` stacks a contiguous run of frames into leaf tensors for
joint optimization; frozen frames participate in every loss but have
their gradient rows zeroed before each update.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .diffgeom import MeshUpsampler, se3_exp_t
from .errors import DataError
from .geometry import Intrinsics, Pose
from .rasters import read_raster, write_raster


@dataclass
class FrameState:
    """Persistent per-frame parameters between stages (numpy domain)."""

    a: float
    b: float
    mesh: np.ndarray  # (gh, gw) float64 log-depth corrections
    pose: Pose  # world-to-camera


@dataclass
class FrameBundle:
    """Constant per-window tensors at the working resolution."""

    images: torch.Tensor  # (F, H, W) float64
    masks: torch.Tensor  # (F, H, W) bool, True = static
    prior_depths: torch.Tensor  # (F, H, W) float64
    nrm: torch.Tensor  # (F, H, W) float64 normalized log prior
    static_vertex: torch.Tensor  # (F, gh, gw) bool
    k: Intrinsics

    @property
    def n_frames(self) -> int:
        return int(self.images.shape[0])


def depth_from_params(
    a: torch.Tensor,
    b: torch.Tensor,
    nrm: torch.Tensor,
    mesh: torch.Tensor,
    upsampler: MeshUpsampler,
) -> torch.Tensor:
    """(F,), (F,), (F,H,W), (F,gh,gw) -> strictly positive (F,H,W)."""
    log_d = a[:, None, None] + b[:, None, None] * nrm + upsampler(mesh)
    return torch.exp(log_d)


class WindowState:
    """Leaf parameter tensors for one window of frames.

    Pose parametrization is a left twist on a constant base: P_t =
    exp(S xi_t) P_t0, so xi = 0 reproduces the initialization and
    gradients live in the tangent space at the current estimate.

    S and mesh_gain are step preconditioners. Adam moves every raw
    coordinate by about lr per iteration regardless of its units, so the
    iteration budget caps each coordinate's total excursion near
    lr * iters. Rotations (radians) and log-depth offsets already live on
    that scale; twist translations are therefore expressed in units of
    the scene's prior depth scale (pose_scale), and raw mesh values are
    amplified by mesh_gain so coarse log-bias corrections of a few tenths
    stay reachable. The exported FrameState always carries effective
    (unit-free) values; the gains exist only inside the raw leaves.
    """

    def __init__(
        self,
        frames: list,
        states: list,
        nrm: torch.Tensor,
        upsampler: MeshUpsampler,
        pose_free,
        depth_free,
        pose_scale: float = 1.0,
        mesh_gain: float = 1.0,
        mesh_free: bool = True,
    ):
        if not (len(frames) == len(states) == nrm.shape[0]):
            raise DataError("window frame/state/prior count mismatch")
        if not (pose_scale > 0 and mesh_gain > 0):
            raise DataError("preconditioners must be positive")
        self.frames = list(frames)
        self.upsampler = upsampler
        self.nrm = nrm
        self.pose_scale = float(pose_scale)
        self.mesh_gain = float(mesh_gain)
        f = len(frames)
        self.a = torch.tensor([s.a for s in states], dtype=torch.float64)
        self.b = torch.tensor([s.b for s in states], dtype=torch.float64)
        self.mesh = torch.tensor(
            np.stack([s.mesh for s in states]) / self.mesh_gain, dtype=torch.float64
        )
        self.xi = torch.zeros(f, 6, dtype=torch.float64)
        self.base_poses = torch.tensor(
            np.stack([s.pose.matrix() for s in states]), dtype=torch.float64
        )
        for p in (self.a, self.b, self.mesh, self.xi):
            p.requires_grad_(True)
        self.pose_free = torch.as_tensor(pose_free, dtype=torch.bool)
        self.depth_free = torch.as_tensor(depth_free, dtype=torch.bool)
        self.mesh_free = bool(mesh_free)
        if self.pose_free.shape != (f,) or self.depth_free.shape != (f,):
            raise DataError("freeze mask length mismatch")
        self._xi_scale = torch.tensor(
            [self.pose_scale] * 3 + [1.0, 1.0, 1.0], dtype=torch.float64
        )

    @property
    def params(self) -> list:
        return [self.a, self.b, self.mesh, self.xi]

    def depths(self) -> torch.Tensor:
        return depth_from_params(
            self.a, self.b, self.nrm, self.mesh * self.mesh_gain, self.upsampler
        )

    def effective_meshes(self) -> torch.Tensor:
        return self.mesh * self.mesh_gain

    def poses(self) -> torch.Tensor:
        return se3_exp_t(self.xi * self._xi_scale) @ self.base_poses

    def mask_frozen_grads(self) -> None:
        """Zero gradient rows of frozen frames in place."""
        with torch.no_grad():
            dm = self.depth_free.to(torch.float64)
            pm = self.pose_free.to(torch.float64)
            if self.a.grad is not None:
                self.a.grad *= dm
            if self.b.grad is not None:
                self.b.grad *= dm
            if self.mesh.grad is not None:
                self.mesh.grad *= dm[:, None, None]
                if not self.mesh_free:
                    self.mesh.grad.zero_()
            if self.xi.grad is not None:
                self.xi.grad *= pm[:, None]

    def export(self) -> list:
        """Resolve the optimized tensors back into per-frame FrameStates."""
        with torch.no_grad():
            poses = self.poses().numpy()
            a = self.a.numpy()
            b = self.b.numpy()
            mesh = self.mesh.numpy() * self.mesh_gain
        out = []
        for i in range(len(self.frames)):
            out.append(
                FrameState(
                    a=float(a[i]),
                    b=float(b[i]),
                    mesh=mesh[i].copy(),
                    pose=Pose.from_matrix(poses[i]),
                )
            )
        return out


def interpolate_pose(p0: Pose, p1: Pose, alpha: float) -> Pose:
    """Twist-space interpolation from p0 toward p1 by alpha in [0, 1]."""
    from .geometry import se3_exp, se3_log

    delta = se3_log(p1 @ p0.inverse())
    return se3_exp(alpha * delta) @ p0


def checkpoint_path(directory, frame_id: int) -> Path:
    return Path(directory) / f"frame_{frame_id:06d}.gcvdr"


def save_frame_state(directory, frame_id: int, state: FrameState) -> None:
    """One raster per frame: row vector [a, b, twist(6), mesh...]."""
    from .geometry import se3_log

    mesh = np.asarray(state.mesh, dtype=np.float64)
    twist = se3_log(state.pose)
    payload = np.concatenate([[state.a, state.b], twist, mesh.ravel()])
    Path(directory).mkdir(parents=True, exist_ok=True)
    write_raster(payload[None, :], checkpoint_path(directory, frame_id))


def load_frame_state(directory, frame_id: int, gh: int, gw: int) -> FrameState:
    from .geometry import se3_exp

    path = checkpoint_path(directory, frame_id)
    data = read_raster(path)
    flat = np.asarray(data, dtype=np.float64).ravel()
    if flat.size != 8 + gh * gw:
        raise DataError(
            f"checkpoint {path} holds {flat.size} values, expected {8 + gh * gw}"
        )
    return FrameState(
        a=float(flat[0]),
        b=float(flat[1]),
        mesh=flat[8:].reshape(gh, gw),
        pose=se3_exp(flat[2:8]),
    )


def has_checkpoint(directory, frame_id: int) -> bool:
    return checkpoint_path(directory, frame_id).exists()
