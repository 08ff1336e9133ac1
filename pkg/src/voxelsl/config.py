"""JSON run configuration with a strict schema.

Unknown keys are rejected at every level. Only two environment variables
override file values: ``VOXELSL_WORKERS`` and ``VOXELSL_SEED``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .geometry import CameraModel, ProjectorModel, default_camera, default_projector
from .simulator import RadiometricParams
from .trainer import TrainConfig

__all__ = [
    "CameraSpec",
    "ProjectorSpec",
    "TrainSpec",
    "RadiometrySpec",
    "PathsSpec",
    "RunConfig",
    "ConfigError",
    "load_run_config",
    "camera_from_json",
    "projector_from_json",
]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CameraSpec(_Strict):
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: list[float] = Field(default_factory=lambda: [1.0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0, 1.0])

    @field_validator("pose")
    @classmethod
    def _sixteen(cls, v):
        if len(v) != 16:
            raise ValueError("pose needs 16 numbers (row-major 4x4)")
        return v

    def build(self) -> CameraModel:
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.pose)

    @classmethod
    def from_model(cls, cam: CameraModel) -> "CameraSpec":
        return cls(**cam.to_dict())


class ProjectorSpec(CameraSpec):
    """Projector intrinsics plus its pose (projector -> world); baseline is checked against the pose."""

    baseline: Optional[float] = None

    def build(self) -> ProjectorModel:
        intr = CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
        return ProjectorModel(intr, self.pose, self.baseline)

    @classmethod
    def from_model(cls, proj: ProjectorModel) -> "ProjectorSpec":
        return cls(**proj.to_dict())


class TrainSpec(_Strict):
    grid_dims: tuple[int, int, int] = (256, 256, 256)
    alpha_init: float = 1e-2
    step_size: float = 0.5
    rays_per_iter: int = 8192
    phase1_iters: int = 3000
    phase2_iters: int = 29000
    lambda_d: float = 0.01
    lambda_s_phase2: float = 1.0
    learning_rate: float = 1.0
    lr_final: float = 0.1
    seed: int = 0
    near: Optional[float] = None
    jitter: bool = True
    z_max: float = 1.0
    normalize_surface: bool = False
    t_stop: float = 1e-4
    f_min: float = 0.02
    w_min: float = 0.5
    pattern_blur: float = 0.0
    log_every: int = 100

    def build(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class RadiometrySpec(_Strict):
    B0: float = 0.1
    F0: float = 0.8
    noise_sigma: float = 0.0
    quantize_bits: Literal[0, 8] = 0

    def build(self) -> RadiometricParams:
        return RadiometricParams(self.B0, self.F0, self.noise_sigma, self.quantize_bits)


class PathsSpec(_Strict):
    patterns: Optional[str] = None
    captures: Optional[str] = None
    checkpoint: Optional[str] = None
    depth: Optional[str] = None
    log: Optional[str] = None


class RunConfig(_Strict):
    camera: Optional[CameraSpec] = None
    projector: Optional[ProjectorSpec] = None
    train: TrainSpec = Field(default_factory=TrainSpec)
    radiometry: RadiometrySpec = Field(default_factory=RadiometrySpec)
    paths: PathsSpec = Field(default_factory=PathsSpec)
    workers: int = 1

    def camera_model(self) -> CameraModel:
        return self.camera.build() if self.camera else default_camera()

    def projector_model(self) -> ProjectorModel:
        return self.projector.build() if self.projector else default_projector()


def _env_overrides(cfg: RunConfig, environ) -> RunConfig:
    if "VOXELSL_WORKERS" in environ:
        try:
            cfg.workers = int(environ["VOXELSL_WORKERS"])
        except ValueError:
            raise ConfigError("VOXELSL_WORKERS must be an integer") from None
    if "VOXELSL_SEED" in environ:
        try:
            cfg.train.seed = int(environ["VOXELSL_SEED"])
        except ValueError:
            raise ConfigError("VOXELSL_SEED must be an integer") from None
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def parse_run_config(data: dict, environ=None) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    return _env_overrides(cfg, os.environ if environ is None else environ)


def load_run_config(path, environ=None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(data, environ)


def camera_from_json(path) -> CameraModel:
    try:
        return CameraSpec.model_validate_json(Path(path).read_text()).build()
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def projector_from_json(path) -> ProjectorModel:
    try:
        return ProjectorSpec.model_validate_json(Path(path).read_text()).build()
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
