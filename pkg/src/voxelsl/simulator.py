"""Synthetic structured-light captures of analytic scenes with exact ground truth.

A scene is a height field over the camera image: ``depth_at(col_c, row_c)``
gives the metric depth (mm along -z) of the surface seen through continuous
pixel coordinates. Everything farther than the surface along a camera ray
is treated as solid when testing projector visibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, ProjectorModel, pixel_directions, project_to_pattern
from .patterns import Pattern
from .renderer import sample_pattern

SHADOW_EPS = 1.0  # mm of projector depth


class Scene:
    kind = "scene"

    def depth_at(self, colc, rowc, cam: CameraModel):
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def describe(self) -> dict:
        return {"kind": self.kind, **self.params()}


@dataclass
class PlaneScene(Scene):
    depth: float = 1000.0
    kind = "plane"

    def depth_at(self, colc, rowc, cam):
        return np.full(np.broadcast(colc, rowc).shape, float(self.depth))

    def params(self):
        return {"depth": self.depth}


@dataclass
class RampScene(Scene):
    """Depth linear in image column: ``depth0 + slope * (col_c - cx)`` (mm, mm/px)."""

    depth0: float = 1000.0
    slope: float = 0.5
    kind = "ramp"

    def depth_at(self, colc, rowc, cam):
        colc = np.asarray(colc, dtype=np.float64)
        return self.depth0 + self.slope * (colc - cam.cx) + 0.0 * np.asarray(rowc)

    def params(self):
        return {"depth0": self.depth0, "slope": self.slope}


@dataclass
class SphereScene(Scene):
    """Sphere centered on the optical axis in front of a fronto-parallel backdrop."""

    center_depth: float = 1000.0
    radius: float = 250.0
    background: float = 1200.0
    kind = "sphere"

    def depth_at(self, colc, rowc, cam):
        dx = (np.asarray(colc, dtype=np.float64) - cam.cx) / cam.fx
        dy = (np.asarray(rowc, dtype=np.float64) - cam.cy) / cam.fy
        dd = dx * dx + dy * dy + 1.0
        zc = self.center_depth
        disc = zc * zc - dd * (zc * zc - self.radius**2)
        hit = disc >= 0
        t = (zc - np.sqrt(np.where(hit, disc, 0.0))) / dd
        return np.where(hit, np.minimum(t, self.background), self.background)

    def params(self):
        return {"center_depth": self.center_depth, "radius": self.radius, "background": self.background}


@dataclass
class StepScene(Scene):
    """Two fronto-parallel planes meeting at a vertical edge at column ``edge_col``."""

    near_depth: float = 900.0
    far_depth: float = 1200.0
    edge_col: float = 320.0
    near_side: str = "left"
    kind = "step"

    def __post_init__(self):
        if self.near_side not in ("left", "right"):
            raise ValueError("near_side must be 'left' or 'right'")

    def depth_at(self, colc, rowc, cam):
        colc = np.asarray(colc, dtype=np.float64) + 0.0 * np.asarray(rowc)
        near = colc < self.edge_col if self.near_side == "left" else colc >= self.edge_col
        return np.where(near, self.near_depth, self.far_depth)

    def params(self):
        return {
            "near_depth": self.near_depth,
            "far_depth": self.far_depth,
            "edge_col": self.edge_col,
            "near_side": self.near_side,
        }


SCENES = {"plane": PlaneScene, "ramp": RampScene, "sphere": SphereScene, "step": StepScene}


@dataclass
class SceneDepth:
    depth: np.ndarray
    valid: np.ndarray
    scene: Scene
    cam: CameraModel
    description: dict = field(default_factory=dict)

    def points(self) -> np.ndarray:
        """Camera-frame surface point of every pixel, (H, W, 3)."""
        rows, cols = np.mgrid[0 : self.cam.height, 0 : self.cam.width]
        return pixel_directions(rows, cols, self.cam) * self.depth[..., None]

    @property
    def min_depth(self) -> float:
        return float(self.depth[self.valid].min())


def analytic_scene(kind: str, params: dict | None, cam: CameraModel) -> SceneDepth:
    if kind not in SCENES:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {sorted(SCENES)}")
    try:
        scene = SCENES[kind](**(params or {}))
    except TypeError as exc:
        raise ValueError(f"bad parameters for {kind} scene: {exc}") from None
    rows, cols = np.mgrid[0 : cam.height, 0 : cam.width]
    depth = scene.depth_at(cols + 0.5, rows + 0.5, cam).astype(np.float64)
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise ValueError("scene surface leaves the camera frustum (non-positive depth)")
    return SceneDepth(depth, np.ones(depth.shape, bool), scene, cam, scene.describe())


def inside_solid(scene: Scene, cam: CameraModel, q: np.ndarray) -> np.ndarray:
    """True where camera-frame points ``q`` (..., 3) lie behind the surface."""
    depth = -q[..., 2]
    ok = depth > 0
    safe = np.where(ok, depth, 1.0)
    colc = cam.fx * q[..., 0] / safe + cam.cx
    rowc = cam.fy * q[..., 1] / safe + cam.cy
    return ok & (depth > scene.depth_at(colc, rowc, cam))


def projector_depth_buffer(
    scene: SceneDepth, proj: ProjectorModel, targets: np.ndarray, steps: int = 96, refine: int = 30
) -> np.ndarray:
    """First-hit projector depth along the projector rays through ``targets`` (P, 3).

    This is the projector-view depth buffer evaluated at the projected
    coordinates of each target point: the ray from the projector center
    through the target is marched from where it first can reach the scene
    (camera depth >= the scene's minimum depth) and the first entry into the
    solid is refined by bisection. Rays that never enter return the target's
    own projector depth.
    """
    c = proj.center
    seg = targets - c
    # projector-frame depth of the target; q(lam) = c + lam * seg has depth lam * zp
    zp = -(seg @ proj.rotation)[:, 2]
    cam_depth_c = -c[2]
    cam_depth_t = -targets[:, 2]
    d_min = scene.min_depth
    # camera depth along the segment is affine in lam
    with np.errstate(divide="ignore", invalid="ignore"):
        lam0 = np.clip((d_min - cam_depth_c) / (cam_depth_t - cam_depth_c), 0.0, 1.0)
    lam0 = np.where(np.isfinite(lam0), lam0, 0.0)
    hit_lam = np.ones(len(targets))
    found = np.zeros(len(targets), bool)
    prev = lam0.copy()
    for k in range(1, steps + 1):
        lam = lam0 + (1.0 - lam0) * k / steps
        # the target itself sits on the surface; stop just short of it
        lam_eval = np.minimum(lam, 1.0 - 1e-9)
        q = c + lam_eval[:, None] * seg
        inside = inside_solid(scene.scene, scene.cam, q) & ~found
        if np.any(inside):
            lo = prev[inside]
            hi = lam_eval[inside]
            sub = seg[inside]
            for _ in range(refine):
                mid = 0.5 * (lo + hi)
                ins = inside_solid(scene.scene, scene.cam, c + mid[:, None] * sub)
                hi = np.where(ins, mid, hi)
                lo = np.where(ins, lo, mid)
            hit_lam[inside] = hi
            found |= inside
        prev = lam_eval
    return hit_lam * zp


def projector_shadow_mask(scene: SceneDepth, cam: CameraModel, proj: ProjectorModel, eps: float = SHADOW_EPS) -> np.ndarray:
    """Camera pixels whose surface point is occluded from the projector."""
    pts = scene.points().reshape(-1, 3)
    zp = -((pts - proj.center) @ proj.rotation)[:, 2]
    mask = np.zeros(len(pts), bool)
    front = zp > 0
    if np.any(front):
        hit = projector_depth_buffer(scene, proj, pts[front])
        mask[front] = zp[front] > hit + eps
    return mask.reshape(scene.depth.shape)


@dataclass(frozen=True)
class RadiometricParams:
    B0: float = 0.1
    F0: float = 0.8
    noise_sigma: float = 0.0
    quantize_bits: int = 0

    def __post_init__(self):
        if self.B0 < 0 or self.F0 < 0 or self.B0 + self.F0 > 1.0 + 1e-12:
            raise ValueError("need B0, F0 >= 0 and B0 + F0 <= 1")
        if self.quantize_bits not in (0, 8):
            raise ValueError("quantize_bits must be 0 or 8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class SimulatedCapture:
    images: list[np.ndarray]
    lit: np.ndarray  # in projector view and not shadowed
    shadow: np.ndarray
    pattern_values: np.ndarray  # (N, H, W) pattern value at each pixel's surface point


def simulate_captures(
    scene: SceneDepth,
    patterns: list[Pattern],
    cam: CameraModel,
    proj: ProjectorModel,
    rad: RadiometricParams = RadiometricParams(),
    seed: int = 0,
    shadow: np.ndarray | None = None,
) -> SimulatedCapture:
    pts = scene.points()
    u, v, front = project_to_pattern(pts, proj)
    if shadow is None:
        shadow = projector_shadow_mask(scene, cam, proj)
    images = []
    values = []
    in_view = np.zeros(scene.depth.shape, bool)
    for p in patterns:
        h, w = p.image.shape
        in_view = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        lit = in_view & ~shadow & scene.valid
        val = np.where(lit, sample_pattern(p.image, u, v), 0.0)
        values.append(val)
        images.append(rad.B0 + rad.F0 * val)
    lit = in_view & ~shadow & scene.valid
    rng = np.random.default_rng(seed)
    out = []
    for img in images:
        if rad.noise_sigma > 0:
            img = img + rng.normal(0.0, rad.noise_sigma, img.shape)
        img = np.clip(img, 0.0, 1.0)
        if rad.quantize_bits == 8:
            img = np.round(img * 255.0) / 255.0
        out.append(img)
    return SimulatedCapture(out, lit, shadow, np.stack(values))


def default_near(scene: SceneDepth) -> float:
    """Near plane at half the closest ground-truth depth."""
    return 0.5 * scene.min_depth
