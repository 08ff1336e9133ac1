"""Two-phase voxel-grid optimization and depth extraction."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .density_grid import DensityGrid, init_bias
from .geometry import CameraModel, NdcFrame, ProjectorModel, ndc_frame_from_camera, pixel_ndc_xy
from .losses import LossReport, LossWeights, RayBatch, RenderContext, backward_batch
from .metrics import DepthMap, DisparityMap, depth_to_disparity
from .renderer import F_MIN, PixelStats, compute_background_and_contrast, sample_boundaries

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.99
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    grid_dims: tuple[int, int, int] = (256, 256, 256)
    alpha_init: float = 1e-2
    step_size: float = 0.5  # fraction of a z-voxel
    rays_per_iter: int = 8192
    phase1_iters: int = 3000
    phase2_iters: int = 29000
    lambda_d: float = 0.01
    lambda_s_phase2: float = 1.0
    learning_rate: float = 1.0
    lr_final: float = 0.1
    seed: int = 0
    near: float | None = None
    jitter: bool = True
    z_max: float = 1.0
    normalize_surface: bool = False
    t_stop: float = 1e-4
    f_min: float = F_MIN
    w_min: float = 0.5
    pattern_blur: float = 0.0
    log_every: int = 100

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 2:
            raise ValueError("grid_dims needs three sizes >= 2")
        for name in ("rays_per_iter", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.phase1_iters < 0 or self.phase2_iters < 0 or self.phase1_iters + self.phase2_iters == 0:
            raise ValueError("need a positive total iteration count")
        if not (0 < self.step_size and -1.0 < self.z_max <= 1.0):
            raise ValueError("step_size must be positive and z_max in (-1, 1]")

    @property
    def total_iters(self) -> int:
        return self.phase1_iters + self.phase2_iters

    @property
    def step_ndc(self) -> float:
        """Sampling step in NDC units: step_size times the z-extent of one voxel (2 / N_z)."""
        return self.step_size * 2.0 / self.grid_dims[2]

    @property
    def samples_per_ray(self) -> int:
        return max(2, int(round((self.z_max + 1.0) / self.step_ndc)))

    def weights_at(self, iteration: int) -> LossWeights:
        lam_s = 0.0 if iteration < self.phase1_iters else self.lambda_s_phase2
        return LossWeights(self.lambda_d, lam_s)

    def lr_at(self, iteration: int) -> float:
        frac = iteration / max(self.total_iters, 1)
        return self.learning_rate * (self.lr_final / self.learning_rate) ** frac

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_dims"] = list(self.grid_dims)
        return d


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    counts: np.ndarray  # per-voxel update counts used for bias correction
    step_count: int = 0

    @classmethod
    def for_grid(cls, grid: DensityGrid) -> "OptimizerState":
        return cls(
            np.zeros(grid.dims, np.float32), np.zeros(grid.dims, np.float32), np.zeros(grid.dims, np.int32)
        )


def adam_step(grid: DensityGrid, grad, state: OptimizerState, lr: float) -> int:
    """Sparse Adam: only voxels with a nonzero gradient move. Returns how many did."""
    g = grad.raw_grad if hasattr(grad, "raw_grad") else np.asarray(grad, dtype=np.float64)
    if g.shape != grid.raw.shape:
        raise ValueError("gradient shape does not match the grid")
    state.step_count += 1
    return int(
        kernels.sparse_adam(
            grid.raw, np.ascontiguousarray(g, dtype=np.float64), state.first_moment, state.second_moment,
            state.counts, lr, BETA1, BETA2, ADAM_EPS,
        )
    )


def make_batch(
    captures: np.ndarray,
    stats: PixelStats,
    rng: np.random.Generator,
    M: int,
    cam: CameraModel,
    K: int = 2,
    jitter: bool = False,
) -> RayBatch:
    """M valid pixels drawn without replacement, each paired with all N captures."""
    valid = np.flatnonzero(stats.valid.ravel())
    if valid.size == 0:
        raise ValueError("no valid pixels to train on")
    if valid.size < M:
        warnings.warn(f"only {valid.size} valid pixels for a batch of {M}; sampling with replacement")
        pick = valid[rng.integers(0, valid.size, M)]
    else:
        pick = valid[rng.choice(valid.size, M, replace=False)]
    rows, cols = np.divmod(pick, stats.valid.shape[1])
    xs, ys = pixel_ndc_xy(rows, cols, cam)
    jit = rng.random((M, K)) if jitter else np.full((M, K), 0.5)
    N = captures.shape[0]
    I = np.ascontiguousarray(captures.reshape(N, -1)[:, pick].T, dtype=np.float64)
    return RayBatch(
        rows=rows, cols=cols, xs=xs, ys=ys,
        B=stats.B.ravel()[pick].astype(np.float64), F=stats.F.ravel()[pick].astype(np.float64),
        I=I, jit=jit,
    )


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class Trainer:
    """Holds optimization state for one capture set; :meth:`run` executes the schedule."""

    captures: np.ndarray  # (N, H, W) in [0, 1]
    patterns: np.ndarray  # (N, Hp, Wp) in [0, 1]
    cam: CameraModel
    proj: ProjectorModel
    config: TrainConfig
    workers: int = 1
    snapshot_path: str | None = None
    history: list = field(default_factory=list)
    stats: PixelStats = field(init=False)
    frame: NdcFrame = field(init=False)
    grid: DensityGrid = field(init=False)

    def __post_init__(self):
        self.captures = np.asarray(self.captures, dtype=np.float64)
        if self.captures.ndim != 3 or self.captures.shape[0] < 2:
            raise ValueError("need a stack of at least two captures")
        if self.captures.shape[1:] != (self.cam.height, self.cam.width):
            raise ValueError("capture size does not match the camera")
        if len(self.patterns) != len(self.captures):
            raise ValueError("pattern and capture counts differ")
        if self.config.near is None:
            raise ValueError("config.near must be set (near plane in mm)")
        cfg = self.config
        self.stats = compute_background_and_contrast(list(self.captures), cfg.f_min)
        self.frame = ndc_frame_from_camera(self.cam, cfg.near)
        pats = np.asarray(self.patterns, dtype=np.float32)
        if cfg.pattern_blur > 0:
            from scipy.ndimage import gaussian_filter

            pats = np.stack([gaussian_filter(p, cfg.pattern_blur) for p in pats]).astype(np.float32)
        self.ctx = RenderContext(self.frame, self.proj, pats, cfg.samples_per_ray, cfg.z_max, cfg.normalize_surface)
        self.grid = DensityGrid.zeros(cfg.grid_dims, init_bias(cfg.alpha_init, cfg.step_ndc))
        self.opt = OptimizerState.for_grid(self.grid)
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0

    def step(self) -> LossReport:
        cfg = self.config
        it = self.iteration
        batch = make_batch(self.captures, self.stats, self.rng, cfg.rays_per_iter, self.cam, self.ctx.K, cfg.jitter)
        report, grad = backward_batch(self.grid, batch, self.ctx, cfg.weights_at(it), cfg.t_stop, self.workers)
        if not np.isfinite(report.total) or not np.all(np.isfinite(grad.raw_grad)):
            self._dump_snapshot()
            raise NonFiniteLoss(f"non-finite loss at iteration {it}: {report}")
        adam_step(self.grid, grad, self.opt, cfg.lr_at(it))
        self.iteration += 1
        return report

    def _dump_snapshot(self):
        if self.snapshot_path:
            from .io import write_checkpoint

            write_checkpoint(self.snapshot_path, self.grid)
            log.error("wrote diagnostic snapshot to %s", self.snapshot_path)

    def run(self, callback=None) -> DensityGrid:
        cfg = self.config
        t0 = time.perf_counter()
        while self.iteration < cfg.total_iters:
            report = self.step()
            it = self.iteration
            if it % cfg.log_every == 0 or it == cfg.total_iters or it == 1:
                row = report.row(it, time.perf_counter() - t0)
                self.history.append(row)
                log.info("iter %d photo %.5f dist %.5f surf %.5f total %.5f (%.1fs)", *row)
            if callback is not None:
                callback(it, report)
        self.wall_clock_s = time.perf_counter() - t0
        log.info("training finished in %.1fs", self.wall_clock_s)
        return self.grid


def train(captures, patterns, cam, proj, config: TrainConfig, workers: int = 1, history: list | None = None) -> DensityGrid:
    trainer = Trainer(np.asarray(captures), np.asarray(patterns), cam, proj, config, workers)
    grid = trainer.run()
    if history is not None:
        history.extend(trainer.history)
    return grid


def extract_depth_map(
    grid: DensityGrid,
    cam: CameraModel,
    frame: NdcFrame,
    K: int,
    w_min: float = 0.5,
    normalize: bool = False,
    z_max: float = 1.0,
    baseline: float | None = None,
) -> tuple[DepthMap, DisparityMap | None]:
    """Render the surface point of every pixel (midpoint samples) and keep its metric depth.

    Pixels whose accumulated weight stays below ``w_min`` are invalid. The
    disparity map is returned when ``baseline`` is given.
    """
    rows, cols = np.mgrid[0 : cam.height, 0 : cam.width]
    xs, ys = pixel_ndc_xy(rows.ravel(), cols.ravel(), cam)
    pts = np.zeros((xs.size, 3))
    acc = np.zeros(xs.size)
    kernels.render_depth_rays(
        grid.raw, grid.bias, xs, ys, sample_boundaries(K, z_max), frame.r, frame.t, frame.near, normalize, pts, acc
    )
    depth = -pts[:, 2].reshape(cam.height, cam.width)
    valid = (acc.reshape(depth.shape) >= w_min) & (depth > 0)
    dm = DepthMap(np.where(valid, depth, 0.0), valid)
    disp = depth_to_disparity(dm, cam.fx, baseline) if baseline else None
    return dm, disp
