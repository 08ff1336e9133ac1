"""Raw-density voxel lattice over the NDC cube with post-activation softplus.

Lattice nodes sit on the cube faces: node ``i`` along an axis of size ``N``
is at ``-1 + 2 i / (N - 1)``. Layout is (x, y, z) with z fastest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def init_bias(alpha_init: float, delta: float) -> float:
    """Shift ``b`` making every fresh sample's opacity equal ``alpha_init`` over a step ``delta``."""
    if not (0.0 < alpha_init < 1.0):
        raise ValueError(f"alpha_init must be in (0, 1), got {alpha_init}")
    if not delta > 0:
        raise ValueError(f"step size must be positive, got {delta}")
    # log((1 - a)^(-1/delta) - 1) = log(expm1(y)); for large y use y + log1p(-exp(-y))
    y = -np.log1p(-alpha_init) / delta
    if y > 30.0:
        return float(y + np.log1p(-np.exp(-y)))
    return float(np.log(np.expm1(y)))


def activate(raw, b: float):
    """Shifted softplus ``log(1 + exp(raw + b))``; asymptotes are used beyond |arg| > 30."""
    x = np.asarray(raw, dtype=np.float64) + b
    out = np.where(x > 30.0, x, np.where(x < -30.0, np.exp(np.minimum(x, 0.0)), np.log1p(np.exp(np.minimum(x, 30.0)))))
    return out if out.ndim else float(out)


def activate_grad(raw, b: float):
    """d softplus / d raw, i.e. sigmoid(raw + b)."""
    x = np.asarray(raw, dtype=np.float64) + b
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class DensityGrid:
    raw: np.ndarray
    bias: float

    def __post_init__(self):
        self.raw = np.ascontiguousarray(self.raw)
        if self.raw.ndim != 3 or min(self.raw.shape) < 2:
            raise ValueError(f"grid needs >= 2 nodes per axis, got shape {self.raw.shape}")
        if not np.isfinite(self.bias):
            raise ValueError("bias must be finite")

    @classmethod
    def zeros(cls, dims, bias: float, dtype=np.float32) -> "DensityGrid":
        return cls(np.zeros(tuple(int(d) for d in dims), dtype=dtype), float(bias))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.raw.shape)

    def copy(self) -> "DensityGrid":
        return DensityGrid(self.raw.copy(), self.bias)


@dataclass
class GridGradient:
    raw_grad: np.ndarray

    @classmethod
    def like(cls, grid: DensityGrid) -> "GridGradient":
        return cls(np.zeros(grid.dims, dtype=np.float64))


def trilinear_stencil(x, dims):
    """Corner indices and weights for NDC points (..., 3).

    Returns ``(idx, w)`` with ``idx`` of shape (..., 8, 3) and ``w`` of shape
    (..., 8). Coordinates are clamped to the cube first.
    """
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    n = np.asarray(dims, dtype=np.float64)
    g = (x + 1.0) * 0.5 * (n - 1.0)
    lo = np.minimum(np.floor(g), n - 2.0)
    f = g - lo
    lo = lo.astype(np.int64)
    idx = np.empty(x.shape[:-1] + (8, 3), dtype=np.int64)
    w = np.ones(x.shape[:-1] + (8,))
    for k in range(8):
        for a in range(3):
            bit = (k >> (2 - a)) & 1
            idx[..., k, a] = lo[..., a] + bit
            w[..., k] *= f[..., a] if bit else 1.0 - f[..., a]
    return idx, w


def query_raw(grid: DensityGrid, x):
    idx, w = trilinear_stencil(x, grid.dims)
    vals = grid.raw[idx[..., 0], idx[..., 1], idx[..., 2]].astype(np.float64)
    out = np.sum(vals * w, axis=-1)
    return out if out.ndim else float(out)


def accumulate_grad(grad: GridGradient, x, upstream) -> None:
    """Scatter ``upstream`` into the 8 lattice entries enclosing each point."""
    idx, w = trilinear_stencil(x, grad.raw_grad.shape)
    contrib = np.asarray(upstream, dtype=np.float64)[..., None] * w
    np.add.at(
        grad.raw_grad,
        (idx[..., 0].ravel(), idx[..., 1].ravel(), idx[..., 2].ravel()),
        contrib.ravel(),
    )
