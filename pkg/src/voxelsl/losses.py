"""Training losses and the batched analytic gradient.

Per batch of M valid pixels evaluated against N patterns:

    photo   = mean over (ray, pattern) of (rendered - captured)^2
    dist    = mean over rays of the interval distortion of the ray weights
    surface = mean over (ray, pattern) of (color at surface point - captured)^2
    total   = photo + lambda_d * dist + lambda_s * surface
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .density_grid import DensityGrid, GridGradient, activate, query_raw
from .geometry import NdcFrame, ProjectorModel, ndc_to_world, project_to_pattern
from .renderer import composite, render_surface_point, sample_boundaries, sample_pattern


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 0.01
    lambda_s: float = 0.0

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    photo: float
    dist: float
    surface: float
    total: float
    ray_count: int

    def row(self, iteration: int, wall_clock_s: float) -> list:
        return [iteration, self.photo, self.dist, self.surface, self.total, wall_clock_s]


CSV_HEADER = ["iteration", "photo", "dist", "surface", "total", "wall_clock_s"]


def write_loss_csv(path, rows) -> None:
    from .io import atomic_write

    with atomic_write(path, "w") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_HEADER)
        wr.writerows(rows)


def _mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("empty batch")
    if a.shape != b.shape:
        raise ValueError("rendered and captured sizes differ")
    return float(np.mean((a - b) ** 2))


def photometric_loss(rendered, captured) -> float:
    return _mse(rendered, captured)


def surface_loss(surface_rendered, captured) -> float:
    return _mse(surface_rendered, captured)


def distortion_loss_ray(s, w):
    """Interval distortion of weights ``w`` (..., K) on boundaries ``s`` (..., K+1).

    Uses the prefix-sum form: the pairwise term equals
    ``2 * sum_i w_i * (m_i * W_{<i} - (wm)_{<i})`` for increasing midpoints m.
    """
    s = np.asarray(s, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    mid = 0.5 * (s[..., 1:] + s[..., :-1])
    length = s[..., 1:] - s[..., :-1]
    w_before = np.cumsum(w, axis=-1) - w
    wm_before = np.cumsum(w * mid, axis=-1) - w * mid
    pair = 2.0 * np.sum(w * (mid * w_before - wm_before), axis=-1)
    single = np.sum(w * w * length, axis=-1) / 3.0
    out = pair + single
    return out if out.ndim else float(out)


def distortion_loss_total(per_ray) -> float:
    per_ray = np.asarray(per_ray, dtype=np.float64).ravel()
    if per_ray.size == 0:
        raise ValueError("empty batch")
    return float(per_ray.mean())


def total_loss(photo: float, dist: float, surface: float, weights: LossWeights, ray_count: int = 0) -> LossReport:
    total = photo + weights.lambda_d * dist + weights.lambda_s * surface
    return LossReport(float(photo), float(dist), float(surface), float(total), int(ray_count))


@dataclass
class RayBatch:
    """M camera pixels with their radiometry and N captured values each."""

    rows: np.ndarray
    cols: np.ndarray
    xs: np.ndarray  # NDC x* per ray
    ys: np.ndarray
    B: np.ndarray
    F: np.ndarray
    I: np.ndarray  # (M, N)
    jit: np.ndarray  # (M, K) offsets inside each interval, 0.5 = midpoint

    @property
    def size(self) -> int:
        return int(self.xs.shape[0])


@dataclass
class RenderContext:
    """Everything fixed during optimization: warp, projector, patterns, sampling."""

    frame: NdcFrame
    proj: ProjectorModel
    patterns: np.ndarray  # (N, H, W) float32
    K: int
    z_max: float = 1.0
    normalize: bool = False
    s: np.ndarray = field(init=False)
    prj: np.ndarray = field(init=False)
    pats_hwn: np.ndarray = field(init=False)

    def __post_init__(self):
        self.patterns = np.asarray(self.patterns, dtype=np.float32)
        self.s = sample_boundaries(self.K, self.z_max)
        self.prj = kernels.pack_projector(self.proj)
        self.pats_hwn = np.ascontiguousarray(np.moveaxis(self.patterns, 0, -1))

    @property
    def n_patterns(self) -> int:
        return self.patterns.shape[0]


def batch_loss_reference(grid: DensityGrid, batch: RayBatch, ctx: RenderContext, weights: LossWeights) -> LossReport:
    """Loss of a ray batch composed from the plain numpy rendering operations."""
    s = ctx.s
    d = np.diff(s)
    z = s[:-1] + batch.jit * d
    M, K = z.shape
    x_ndc = np.stack([np.repeat(batch.xs[:, None], K, 1), np.repeat(batch.ys[:, None], K, 1), z], axis=-1)
    sigma = activate(query_raw(grid, x_ndc), grid.bias)
    _, _, w = composite(sigma, d)
    X = ndc_to_world(x_ndc, ctx.frame)
    u, v, _ = project_to_pattern(X, ctx.proj)
    B = batch.B[:, None]
    F = batch.F[:, None]
    rendered = np.stack(
        [np.sum(w * (B + F * sample_pattern(p, u, v)), axis=-1) for p in ctx.patterns], axis=-1
    )
    S = render_surface_point(w, X, normalize=ctx.normalize)
    su, sv, _ = project_to_pattern(S, ctx.proj)
    surf = np.stack([batch.B + batch.F * sample_pattern(p, su, sv) for p in ctx.patterns], axis=-1)
    dist = distortion_loss_ray(np.broadcast_to(s, (M, K + 1)), w)
    return total_loss(
        photometric_loss(rendered, batch.I),
        distortion_loss_total(dist),
        surface_loss(surf, batch.I),
        weights,
        M * ctx.n_patterns,
    )


def _run_chunks(fn, M: int, workers: int):
    if workers <= 1 or M < 2 * workers:
        fn(0, M)
        return
    bounds = np.linspace(0, M, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        list(ex.map(lambda k: fn(bounds[k], bounds[k + 1]), range(workers)))


def backward_batch(
    grid: DensityGrid,
    batch: RayBatch,
    ctx: RenderContext,
    weights: LossWeights,
    t_stop: float = 0.0,
    workers: int = 1,
    need_grad: bool = True,
) -> tuple[LossReport, GridGradient]:
    """Loss report and exact gradient of the total loss w.r.t. every raw voxel.

    Rays are split into contiguous chunks for ``workers`` threads; each chunk
    writes to its own output rows and the trilinear scatter runs serially in
    ray order, so the gradient is bitwise independent of ``workers``.
    """
    M = batch.size
    if M == 0:
        raise ValueError("empty batch")
    N = ctx.n_patterns
    K = ctx.K
    terms = np.zeros((M, 3))
    gsamp = np.zeros((M, K))
    zs = np.zeros((M, K))
    raw = grid.raw

    def run(a, b):
        kernels.batch_forward_backward(
            raw, grid.bias, batch.xs[a:b], batch.ys[a:b], ctx.s, batch.jit[a:b],
            ctx.frame.r, ctx.frame.t, ctx.frame.near, ctx.prj, ctx.pats_hwn,
            batch.B[a:b], batch.F[a:b], batch.I[a:b],
            weights.lambda_d, weights.lambda_s, ctx.normalize, 1.0 / (M * N), 1.0 / M,
            need_grad, t_stop, terms[a:b], gsamp[a:b], zs[a:b],
        )

    _run_chunks(run, M, workers)
    grad = GridGradient.like(grid)
    if need_grad:
        kernels.scatter_samples(grad.raw_grad, batch.xs, batch.ys, zs, gsamp)
    sums = terms.sum(axis=0)
    report = total_loss(sums[0] / (M * N), sums[1] / M, sums[2] / (M * N), weights, M * N)
    return report, grad


def batch_loss(grid, batch, ctx, weights, t_stop: float = 0.0, workers: int = 1) -> LossReport:
    """Forward-only loss through the compiled path."""
    return backward_batch(grid, batch, ctx, weights, t_stop, workers, need_grad=False)[0]
