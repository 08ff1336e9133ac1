"""Forward rendering: ray samples in NDC, pattern colors, alpha compositing.

These are the plain numpy reference operations. The batched training path in
:mod:`voxelsl.kernels` implements the same math in compiled loops and is
checked against the functions here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density_grid import DensityGrid, activate, query_raw
from .geometry import NdcFrame, ProjectorModel, Ray, ndc_to_world, project_to_pattern
from .patterns import Pattern

F_MIN = 0.02


@dataclass
class PixelStats:
    B: np.ndarray
    F: np.ndarray
    valid: np.ndarray


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def compute_background_and_contrast(captures, f_min: float = F_MIN) -> PixelStats:
    """Per-pixel minimum (background) and max - min (contrast) over the capture stack."""
    if len(captures) < 2:
        raise ValueError("need at least two captures")
    imgs = [to_gray(c) for c in captures]
    shape = imgs[0].shape
    if any(im.shape != shape for im in imgs):
        raise ValueError("captures differ in size")
    stack = np.stack(imgs)
    B = stack.min(axis=0)
    F = stack.max(axis=0) - B
    return PixelStats(B=B, F=F, valid=F >= f_min)


@dataclass
class RaySamples:
    ray: Ray
    s: np.ndarray
    x_ndc: np.ndarray
    x_world: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray | None = None
    color: np.ndarray | None = None
    alpha: np.ndarray | None = None
    T: np.ndarray | None = None
    w: np.ndarray | None = None


def ray_ndc_xy(ray: Ray, frame: NdcFrame) -> tuple[float, float]:
    d = ray.direction
    return (frame.near * d[0] / (-d[2] * frame.r), frame.near * d[1] / (-d[2] * frame.t))


def sample_boundaries(K: int, z_max: float = 1.0) -> np.ndarray:
    if K < 2:
        raise ValueError("need at least two samples per ray")
    return np.linspace(-1.0, z_max, K + 1)


def sample_along_ray(
    ray: Ray,
    frame: NdcFrame,
    K: int,
    jitter: bool = False,
    rng: np.random.Generator | None = None,
    z_max: float = 1.0,
) -> RaySamples:
    """Stratified samples on ``[-1, z_max]`` in NDC depth (uniform in disparity)."""
    s = sample_boundaries(K, z_max)
    delta = np.diff(s)
    if jitter:
        rng = rng if rng is not None else np.random.default_rng()
        z = s[:-1] + rng.random(K) * delta
    else:
        z = 0.5 * (s[:-1] + s[1:])
    xs, ys = ray_ndc_xy(ray, frame)
    x_ndc = np.stack([np.full(K, xs), np.full(K, ys), z], axis=-1)
    return RaySamples(ray=ray, s=s, x_ndc=x_ndc, x_world=ndc_to_world(x_ndc, frame), delta=delta)


def sample_pattern(image: np.ndarray, u, v, with_grad: bool = False):
    """Bilinear lookup with texel centers at half-integers; 0 outside the pattern.

    With ``with_grad`` also returns d/du and d/dv (zero where clamped or outside).
    """
    image = np.asarray(image)
    h, w = image.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)  # NaN compares False
    gu = np.where(inside, u, 0.5) - 0.5
    gv = np.where(inside, v, 0.5) - 0.5
    cu = np.clip(gu, 0.0, w - 1.0)
    cv = np.clip(gv, 0.0, h - 1.0)
    u0 = np.minimum(np.floor(cu), w - 2).astype(np.int64)
    v0 = np.minimum(np.floor(cv), h - 2).astype(np.int64)
    fu = cu - u0
    fv = cv - v0
    p00 = image[v0, u0]
    p01 = image[v0, u0 + 1]
    p10 = image[v0 + 1, u0]
    p11 = image[v0 + 1, u0 + 1]
    val = (1 - fv) * ((1 - fu) * p00 + fu * p01) + fv * ((1 - fu) * p10 + fu * p11)
    val = np.where(inside, val, 0.0)
    if not with_grad:
        return val
    du = (1 - fv) * (p01 - p00) + fv * (p11 - p10)
    dv = (1 - fu) * (p10 - p00) + fu * (p11 - p01)
    du = np.where(inside & (gu > 0) & (gu < w - 1), du, 0.0)
    dv = np.where(inside & (gv > 0) & (gv < h - 1), dv, 0.0)
    return val, du, dv


def lookup_pattern_color(x_world, stats_at_ray, pattern: Pattern, proj: ProjectorModel):
    """``B + F * P(pi(x))`` with pattern value 0 for points the projector cannot see."""
    B, F = stats_at_ray
    u, v, _ = project_to_pattern(x_world, proj)
    return B + F * sample_pattern(pattern.image, u, v)


def composite(sigma, delta):
    """Opacities, transmittances, and weights along one or more rays (last axis = samples)."""
    tau = np.asarray(sigma, dtype=np.float64) * np.asarray(delta, dtype=np.float64)
    alpha = -np.expm1(-tau)
    # exclusive running sum keeps T exactly non-increasing
    before = np.cumsum(tau, axis=-1)
    before = np.concatenate([np.zeros_like(before[..., :1]), before[..., :-1]], axis=-1)
    T = np.exp(-before)
    return alpha, T, T * alpha


def render_color(w, c):
    w = np.asarray(w, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if w.shape[-1] != c.shape[-1]:
        raise ValueError("weight and color lengths differ")
    return np.sum(w * c, axis=-1)


def render_surface_point(w, x, normalize: bool = False):
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape[-1] != x.shape[-2]:
        raise ValueError("weight and point counts differ")
    p = np.sum(w[..., None] * x, axis=-2)
    if normalize:
        acc = w.sum(axis=-1)[..., None]
        p = np.where(acc > 0, p / np.where(acc > 0, acc, 1.0), 0.0)
    return p


def surface_color(s_l, stats_at_ray, pattern: Pattern, proj: ProjectorModel):
    return lookup_pattern_color(s_l, stats_at_ray, pattern, proj)


def render_ray(
    grid: DensityGrid,
    samples: RaySamples,
    stats_at_ray,
    patterns: list[Pattern],
    proj: ProjectorModel,
) -> RaySamples:
    """Fill densities, per-pattern colors (N, K), and compositing terms of ``samples``."""
    samples.sigma = activate(query_raw(grid, samples.x_ndc), grid.bias)
    samples.color = np.stack(
        [lookup_pattern_color(samples.x_world, stats_at_ray, p, proj) for p in patterns]
    )
    samples.alpha, samples.T, samples.w = composite(samples.sigma, samples.delta)
    return samples
