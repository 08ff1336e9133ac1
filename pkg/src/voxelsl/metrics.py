"""Depth/disparity conversion and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DepthMap:
    depth: np.ndarray  # mm
    valid: np.ndarray

    @classmethod
    def from_array(cls, depth) -> "DepthMap":
        """Valid wherever the value is finite and positive."""
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        return cls(np.where(valid, depth, 0.0), valid)


@dataclass
class DisparityMap:
    disp: np.ndarray  # px
    valid: np.ndarray


def depth_to_disparity(d: DepthMap, fx: float, baseline: float) -> DisparityMap:
    if not (fx > 0 and baseline > 0):
        raise ValueError("fx and baseline must be positive")
    disp = np.zeros_like(d.depth, dtype=np.float64)
    disp[d.valid] = fx * baseline / d.depth[d.valid]
    return DisparityMap(disp, d.valid.copy())


def disparity_to_depth(d: DisparityMap, fx: float, baseline: float) -> DepthMap:
    if not (fx > 0 and baseline > 0):
        raise ValueError("fx and baseline must be positive")
    depth = np.zeros_like(d.disp, dtype=np.float64)
    depth[d.valid] = fx * baseline / d.disp[d.valid]
    return DepthMap(depth, d.valid.copy())


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"map sizes differ: {a.shape} vs {b.shape}")


def mae_depth(
    est: DepthMap,
    gt: DepthMap,
    outlier_disp_threshold: float | None = None,
    fx: float | None = None,
    baseline: float | None = None,
) -> float:
    """Mean absolute depth error (mm) over GT-valid pixels.

    With a disparity threshold, estimated pixels that are invalid or whose
    disparity error exceeds it are replaced by the mean of the valid
    estimated depths before averaging. Without one, invalid estimates are
    simply skipped.
    """
    _same_shape(est.depth, gt.depth)
    if not np.any(gt.valid):
        raise ValueError("ground truth has no valid pixels")
    if outlier_disp_threshold is None:
        m = gt.valid & est.valid
        if not np.any(m):
            raise ValueError("no pixels valid in both maps")
        return float(np.mean(np.abs(est.depth[m] - gt.depth[m])))
    if fx is None or baseline is None:
        raise ValueError("fx and baseline are needed for the disparity outlier test")
    fill = float(est.depth[est.valid].mean()) if np.any(est.valid) else 0.0
    de = depth_to_disparity(est, fx, baseline)
    dg = depth_to_disparity(gt, fx, baseline)
    bad = ~est.valid | (np.abs(de.disp - dg.disp) > outlier_disp_threshold)
    depth = np.where(bad, fill, est.depth)
    return float(np.mean(np.abs(depth[gt.valid] - gt.depth[gt.valid])))


def outlier_percentage(est: DisparityMap, gt: DisparityMap, t: float) -> float:
    """Percent of GT-valid pixels with disparity error above ``t``; invalid estimates count as outliers."""
    if not t > 0:
        raise ValueError("threshold must be positive")
    _same_shape(est.disp, gt.disp)
    n = int(gt.valid.sum())
    if n == 0:
        raise ValueError("ground truth has no valid pixels")
    bad = gt.valid & (~est.valid | (np.abs(est.disp - gt.disp) > t))
    return 100.0 * float(bad.sum()) / n


def evaluate(est: DepthMap, gt: DepthMap, fx: float, baseline: float, thresholds=(0.1, 0.5, 1.0)) -> dict:
    """MAE (plain and outlier-substituted at the largest threshold) plus o(t) per threshold."""
    de = depth_to_disparity(est, fx, baseline)
    dg = depth_to_disparity(gt, fx, baseline)
    out = {
        "mae_mm": round(mae_depth(est, gt), 3) if np.any(est.valid & gt.valid) else None,
        "mae_substituted_mm": round(mae_depth(est, gt, max(thresholds), fx, baseline), 3),
        "valid_gt_pixels": int(gt.valid.sum()),
        "valid_est_pixels": int((est.valid & gt.valid).sum()),
    }
    for t in thresholds:
        out[f"o({t:g})"] = round(outlier_percentage(de, dg, t), 2)
    return out
