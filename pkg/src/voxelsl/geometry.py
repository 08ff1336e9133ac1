"""Camera and projector models, camera rays, and the world <-> NDC warp.

Frame conventions: the camera sits at the world origin with identity pose,
x to the right, y down the image, looking along -z. A point (x, y, z) with
z < 0 lands on continuous pixel coordinates

    col_c = fx * x / (-z) + cx,   row_c = fy * y / (-z) + cy

where pixel (row, col) has its center at (row + 0.5, col + 0.5). The
projector is an inverse camera with the same convention in its own frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _identity() -> np.ndarray:
    return np.eye(4)


def _as_pose(pose) -> np.ndarray:
    m = np.asarray(pose, dtype=np.float64)
    if m.shape == (16,):
        m = m.reshape(4, 4)
    if m.shape != (4, 4):
        raise ValueError(f"pose must be a 4x4 matrix or 16 numbers, got shape {m.shape}")
    return m


def check_rigid(pose: np.ndarray, tol: float = 1e-6) -> None:
    """Raise ValueError unless ``pose`` is a rigid transform (orthonormal, det +1)."""
    rot = pose[:3, :3]
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=tol):
        raise ValueError("pose bottom row must be [0, 0, 0, 1]")
    if not np.allclose(rot @ rot.T, np.eye(3), atol=tol):
        raise ValueError("pose rotation is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > tol:
        raise ValueError("pose rotation must have determinant +1")


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=_identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "pose", _as_pose(self.pose))
        check_rigid(self.pose)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def scaled(self, factor: float) -> "CameraModel":
        """Same optics at ``factor`` times the resolution (pixel-center convention preserved)."""
        return CameraModel(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
            pose=self.pose,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "pose": [float(v) for v in self.pose.ravel()],
        }


@dataclass(frozen=True)
class ProjectorModel:
    """A projector as an inverse pinhole camera.

    ``pose`` maps projector-frame points to world points. ``baseline`` is the
    distance between camera and projector centers in mm; it is derived from
    the pose when omitted.
    """

    intrinsics: CameraModel
    pose: np.ndarray = field(default_factory=_identity)
    baseline: float | None = None

    def __post_init__(self):
        pose = _as_pose(self.pose)
        check_rigid(pose)
        object.__setattr__(self, "pose", pose)
        dist = float(np.linalg.norm(pose[:3, 3]))
        if self.baseline is None:
            object.__setattr__(self, "baseline", dist)
        elif abs(self.baseline - dist) > 1e-6 * max(dist, 1.0):
            raise ValueError(
                f"baseline {self.baseline} disagrees with pose translation norm {dist}"
            )

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    def to_dict(self) -> dict:
        d = self.intrinsics.to_dict()
        d["pose"] = [float(v) for v in self.pose.ravel()]
        d["baseline"] = float(self.baseline)
        return d


def rig_projector(
    intrinsics: CameraModel, baseline: float, converge_at: float | None = None
) -> ProjectorModel:
    """Projector displaced by ``baseline`` mm along +x from the camera.

    With ``converge_at`` set, the projector is toed in about the y axis so its
    optical axis crosses the camera axis at that depth (mm).
    """
    pose = np.eye(4)
    pose[0, 3] = baseline
    if converge_at:
        # rotate the projector's -z axis toward the point (0, 0, -converge_at)
        ang = np.arctan2(baseline, converge_at)
        c, s = np.cos(ang), np.sin(ang)
        pose[:3, :3] = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return ProjectorModel(intrinsics=intrinsics, pose=pose)


# Desk-scale rig: 1280x1024 camera sensor, 1400x1512 projector field, baseline in mm.
DESK_CAMERA = dict(fx=1181.76, fy=1179.92, cx=639.50, cy=511.50, width=1280, height=1024)
DESK_PROJECTOR = dict(fx=2013.30, fy=2016.43, cx=699.16, cy=755.26, width=1400, height=1512)
DESK_BASELINE = 209.39


def default_camera(width: int = 640, height: int = 512) -> CameraModel:
    """Desk camera focal lengths rescaled to ``width``, principal point at the image center."""
    s = width / DESK_CAMERA["width"]
    return CameraModel(
        fx=DESK_CAMERA["fx"] * s,
        fy=DESK_CAMERA["fy"] * s,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


def default_projector(converge_at: float | None = 1000.0) -> ProjectorModel:
    return rig_projector(CameraModel(**DESK_PROJECTOR), DESK_BASELINE, converge_at)


@dataclass(frozen=True)
class NdcFrame:
    near: float
    r: float
    t: float


def ndc_frame_from_camera(cam: CameraModel, near: float) -> NdcFrame:
    if not near > 0:
        raise ValueError(f"near plane must be positive, got {near}")
    if not np.allclose(cam.pose, np.eye(4)):
        raise ValueError("NDC warp assumes the camera pose is the identity")
    return NdcFrame(near=float(near), r=near * cam.cx / cam.fx, t=near * cam.cy / cam.fy)


def world_to_ndc(p, frame: NdcFrame) -> np.ndarray:
    """Map camera-frame points (..., 3) into NDC with the far plane at infinity."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(z >= 0):
        raise ValueError("world_to_ndc: points must have z < 0 (in front of the camera)")
    n = frame.near
    return np.stack([-n * x / (frame.r * z), -n * y / (frame.t * z), 1.0 + 2.0 * n / z], axis=-1)


def ndc_to_world(q, frame: NdcFrame) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    xs, ys, zs = q[..., 0], q[..., 1], q[..., 2]
    if np.any(zs >= 1.0):
        raise ValueError("ndc_to_world: z* must be < 1 (z* = 1 is the point at infinity)")
    n = frame.near
    # 2n*cx/fx == 2r and 2n*cy/fy == 2t
    return np.stack(
        [2.0 * frame.r * xs / (1.0 - zs), 2.0 * frame.t * ys / (1.0 - zs), 2.0 * n / (zs - 1.0)],
        axis=-1,
    )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]


def _check_pixel(row, col, cam: CameraModel):
    row = np.asarray(row)
    col = np.asarray(col)
    if np.any(row < 0) or np.any(row >= cam.height) or np.any(col < 0) or np.any(col >= cam.width):
        raise ValueError("pixel outside image bounds")


def camera_ray(pixel: tuple[int, int], cam: CameraModel) -> Ray:
    row, col = pixel
    _check_pixel(row, col, cam)
    d_cam = np.array([(col + 0.5 - cam.cx) / cam.fx, (row + 0.5 - cam.cy) / cam.fy, -1.0])
    d_cam /= np.linalg.norm(d_cam)
    d = cam.pose[:3, :3] @ d_cam
    return Ray(origin=cam.center, direction=d, pixel=(int(row), int(col)))


def pixel_directions(rows, cols, cam: CameraModel) -> np.ndarray:
    """Unnormalized camera-frame directions with z = -1 for arrays of pixels."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    return np.stack(
        [(cols + 0.5 - cam.cx) / cam.fx, (rows + 0.5 - cam.cy) / cam.fy, -np.ones_like(rows)],
        axis=-1,
    )


def pixel_ndc_xy(rows, cols, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """NDC (x*, y*) of pixel-center rays; constant along each camera ray."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    return (cols + 0.5 - cam.cx) / cam.cx, (rows + 0.5 - cam.cy) / cam.cy


def to_projector_frame(x, proj: ProjectorModel) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x - proj.center) @ proj.rotation  # R^T (x - t), row-vector form


def project_to_pattern(x, proj: ProjectorModel):
    """Continuous pattern coordinates of world points (..., 3).

    Returns ``(u, v, in_front)``. Points at or behind the projector plane are
    flagged ``in_front = False``; their (u, v) are set to NaN.
    """
    p = to_projector_frame(x, proj)
    depth = -p[..., 2]
    in_front = depth > 0
    safe = np.where(in_front, depth, 1.0)
    k = proj.intrinsics
    u = np.where(in_front, k.fx * p[..., 0] / safe + k.cx, np.nan)
    v = np.where(in_front, k.fy * p[..., 1] / safe + k.cy, np.nan)
    return u, v, in_front


def projection_jacobian(x, proj: ProjectorModel) -> np.ndarray:
    """d(u, v)/dx for world points (..., 3), shape (..., 2, 3)."""
    p = to_projector_frame(x, proj)
    depth = -p[..., 2]
    k = proj.intrinsics
    # du/dp = fx * [1/Z', 0, X'/Z'^2], dv/dp = fy * [0, 1/Z', Y'/Z'^2], dp/dx = R^T
    j = np.zeros(p.shape[:-1] + (2, 3))
    j[..., 0, 0] = k.fx / depth
    j[..., 0, 2] = k.fx * p[..., 0] / depth**2
    j[..., 1, 1] = k.fy / depth
    j[..., 1, 2] = k.fy * p[..., 1] / depth**2
    return j @ proj.rotation.T
