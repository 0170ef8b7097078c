"""Run configuration: one flat dataclass, readable from key-value text.

CLI flags override file values; file values override defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .rasters import parse_kv_text


@dataclass
class RunConfig:
    # keyframe selection / association
    keyframe_delta: float = 0.1  # movement threshold, normalized flow units
    assoc_delta: float = 0.9  # descriptor similarity threshold
    tau_set: tuple = (1, 2, 4, 8)  # neighbor offsets; alpha = max(tau_set)
    fb_inlier_ratio: float = 0.5  # verification gate rho
    nms_window: int = 3  # association non-maximum suppression window

    # loss weights (photo, flow, const, grad, deform)
    lambda_photo: float = 1.0
    lambda_flow: float = 10.0
    lambda_const: float = 0.5
    lambda_grad: float = 0.1
    lambda_deform: float = 0.5
    w_dyn: float = 4.0  # deform weight on pairs touching dynamic vertices

    # optimization schedule
    iters_seq: int = 300
    iters_cov: int = 100
    iters_nonkey: int = 100
    lr_seq: float = 2e-4
    lr_cov: float = 5e-5
    lr_nonkey: float = 1e-4
    batch_size: int = 40

    # resolutions
    depth_long_side: int = 384  # adapter resize target; engine runs at stored size
    mesh_long_side: int = 17
    # Adam moves each raw coordinate ~lr per iteration, so the iteration
    # budget caps total excursion; raw mesh units are amplified so coarse
    # log-bias corrections of a few tenths stay reachable within it.
    mesh_step_gain: float = 5.0

    # depth filtering
    filter_span: int = 4  # Omega
    gamma_ratio: float = 2.0  # gamma_1
    gamma_flow: float = 0.1  # gamma_2

    # pose graph
    pgo_max_iters: int = 100

    # ablation switches (0/1); lambda_grad = 0 disables the gradient loss
    skip_pgo: int = 0
    use_mesh: int = 1
    uniform_keyframes: int = 0

    seed: int = 0
    threads: int = 1

    @property
    def alpha(self) -> int:
        return max(self.tau_set)

    def fb_eps(self, long_side: int) -> float:
        return max(1.0, 0.01 * long_side)

    def validate(self) -> "RunConfig":
        positive = [
            ("keyframe_delta", self.keyframe_delta),
            ("assoc_delta", self.assoc_delta),
            ("fb_inlier_ratio", self.fb_inlier_ratio),
            ("mesh_long_side", self.mesh_long_side),
            ("depth_long_side", self.depth_long_side),
            ("batch_size", self.batch_size),
            ("lr_seq", self.lr_seq),
            ("lr_cov", self.lr_cov),
            ("lr_nonkey", self.lr_nonkey),
            ("gamma_ratio", self.gamma_ratio),
            ("gamma_flow", self.gamma_flow),
            ("mesh_step_gain", self.mesh_step_gain),
            ("w_dyn", self.w_dyn),
            ("filter_span", self.filter_span),
            ("pgo_max_iters", self.pgo_max_iters),
            ("threads", self.threads),
        ]
        for name, val in positive:
            if not val > 0:
                raise ConfigError(f"{name} must be positive, got {val}")
        for name, val in [
            ("lambda_photo", self.lambda_photo),
            ("lambda_flow", self.lambda_flow),
            ("lambda_const", self.lambda_const),
            ("lambda_grad", self.lambda_grad),
            ("lambda_deform", self.lambda_deform),
            ("iters_seq", self.iters_seq),
            ("iters_cov", self.iters_cov),
            ("iters_nonkey", self.iters_nonkey),
            ("seed", self.seed),
        ]:
            if val < 0:
                raise ConfigError(f"{name} must be non-negative, got {val}")
        for name, val in [
            ("skip_pgo", self.skip_pgo),
            ("use_mesh", self.use_mesh),
            ("uniform_keyframes", self.uniform_keyframes),
        ]:
            if val not in (0, 1):
                raise ConfigError(f"{name} must be 0 or 1, got {val}")
        taus = tuple(self.tau_set)
        if len(taus) == 0 or list(taus) != sorted(set(int(t) for t in taus)):
            raise ConfigError(f"tau_set must be ascending unique ints, got {taus}")
        if taus[0] < 1:
            raise ConfigError("tau_set entries must be >= 1")
        if self.batch_size <= self.alpha:
            raise ConfigError(
                f"batch_size ({self.batch_size}) must exceed max tau ({self.alpha})"
            )
        if self.nms_window < 1 or self.nms_window % 2 == 0:
            raise ConfigError("nms_window must be odd and >= 1")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, text: str):
    if name == "tau_set":
        try:
            return tuple(int(x) for x in text.replace(",", " ").split())
        except ValueError as e:
            raise ConfigError(f"tau_set: {e}") from e
    kind = _FIELD_TYPES[name]
    try:
        if kind in ("int", int):
            return int(text)
        return float(text)
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from e


def config_from_kv(kv: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    for key, raw in kv.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, str(raw)))
    return cfg.validate()


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        kv = parse_kv_text(text)
    except Exception as e:
        raise ConfigError(f"config {path}: {e}") from e
    return config_from_kv(kv, base)


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        val = getattr(cfg, f.name)
        if f.name == "tau_set":
            val = ",".join(str(t) for t in val)
        lines.append(f"{f.name} {val}")
    return "\n".join(lines) + "\n"
